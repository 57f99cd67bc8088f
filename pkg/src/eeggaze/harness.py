"""Training loop, MAE evaluation, repeated runs and inference benchmarks."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import EegDataset, SplitSpec, batches, split
from .model import ConfigMismatchError, Model, ModelConfig, build, param_count
from .optim import Adam, AdamConfig, mse_loss
from .tensor import NonFiniteError, ShapeError

log = logging.getLogger(__name__)

WARMUP_PASSES = 10


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class RunFailedError(RuntimeError):
    def __init__(self, run: int, cause: Exception):
        super().__init__(f"run {run} failed: {cause}")
        self.run = run


def mae(pred: np.ndarray, target: np.ndarray, kind: str = "euclidean") -> float:
    """Mean euclidean distance per sample, or mean absolute coordinate error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} must both be [N, 2]")
    if pred.shape[0] < 1:
        raise ShapeError("mae needs at least one sample")
    diff = pred - target
    if kind == "euclidean":
        return float(np.mean(np.hypot(diff[:, 0], diff[:, 1])))
    if kind == "per-axis":
        return float(np.mean(np.abs(diff)))
    raise ValueError(f"unknown mae kind {kind!r}")


def centroid_distance(width: float, height: float) -> float:
    """Mean distance from a uniform point on a ``width x height`` rectangle to its centre.

    This is the euclidean MAE of a predictor that always outputs the
    centre, the chance level for uniformly placed gaze targets.
    """
    a, b = width / 2, height / 2
    d = math.hypot(a, b)
    integral = (2 * a * b * d + a**3 * math.log((b + d) / a) + b**3 * math.log((a + d) / b)) / 6
    return integral / (a * b)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    adam: AdamConfig = AdamConfig()
    split: SplitSpec | None = SplitSpec()
    """``None`` trains on every sample with no validation or test set."""
    seed: int = 0
    variant: ModelConfig = ModelConfig()
    normalize_targets: bool = True
    mae_kind: str = "euclidean"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float
    steps: int
    seconds: float = field(default=0.0, compare=False)


@dataclass
class RunReport:
    """Everything one training run produced.

    ``train_loss`` is the sample-weighted mean batch MSE, measured in the
    space the network was trained in (standardized targets when
    ``normalize_targets`` is on). MAE values are in label units.
    """

    variant: str
    seed: int
    param_count: int
    epochs: list[EpochRecord] = field(default_factory=list)
    test_mae: float = float("nan")
    best_val_epoch: int = 0
    best_val_mae: float = float("inf")
    train_seconds: float = field(default=0.0, compare=False)

    @property
    def steps(self) -> int:
        return sum(e.steps for e in self.epochs)

    def records(self) -> list[dict]:
        rows = [dict(record="epoch", variant=self.variant, seed=self.seed, **asdict(e))
                for e in self.epochs]
        rows.append(dict(record="run", variant=self.variant, seed=self.seed,
                         param_count=self.param_count, test_mae=self.test_mae,
                         best_val_epoch=self.best_val_epoch, best_val_mae=self.best_val_mae,
                         train_seconds=self.train_seconds))
        return rows

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())


@dataclass(frozen=True)
class BenchReport:
    mode: str
    total_seconds: float
    samples: int
    forward_calls: int
    warmup_passes: int

    @property
    def seconds_per_1000(self) -> float:
        return self.total_seconds / (self.samples / 1000)

    @property
    def samples_per_second(self) -> float:
        return self.samples / self.total_seconds if self.total_seconds > 0 else math.inf

    def record(self) -> dict:
        return dict(record="bench", **asdict(self), seconds_per_1000=self.seconds_per_1000,
                    samples_per_second=self.samples_per_second)

    def to_jsonl(self) -> str:
        return json.dumps(self.record()) + "\n"


class TargetScaler:
    """Per-axis standardization of gaze labels, foldable into the output layer."""

    def __init__(self, labels: np.ndarray):
        self.mean = labels.mean(axis=0).astype(np.float64)
        std = labels.std(axis=0).astype(np.float64)
        self.std = np.where(std > 0, std, 1.0)

    def encode(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean) / self.std

    def decode(self, y: np.ndarray) -> np.ndarray:
        return y * self.std + self.mean

    def fold_into(self, model: Model) -> None:
        """Rewrite fc2 so the raw network output is already in label units."""
        w, b = model.fc2.weight, model.fc2.bias
        dt = w.values.dtype
        w.values = (w.values * self.std[:, None]).astype(dt)
        b.values = (b.values * self.std + self.mean).astype(dt)


def check_compatible(model_config: ModelConfig, dataset: EegDataset) -> None:
    if (dataset.channels, dataset.timesteps) != (model_config.channels, model_config.timesteps):
        raise ConfigMismatchError(
            f"dataset is {dataset.channels}x{dataset.timesteps}, model expects "
            f"{model_config.channels}x{model_config.timesteps}")


def predict(model: Model, dataset: EegDataset, indices, batch_size: int = 64) -> np.ndarray:
    """Infer-mode outputs for ``indices``, in order."""
    idx = np.asarray(indices)
    outs = [model.forward(dataset.signals[idx[i:i + batch_size]], "infer")
            for i in range(0, idx.size, batch_size)]
    return np.concatenate(outs).astype(np.float64)


def evaluate(model: Model, dataset: EegDataset, indices=None, kind: str = "euclidean",
             batch_size: int = 64) -> float:
    """MAE of infer-mode predictions; never touches parameters or running stats."""
    check_compatible(model.config, dataset)
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    return mae(predict(model, dataset, idx, batch_size), dataset.labels[idx], kind)


def train(dataset: EegDataset, cfg: TrainConfig) -> tuple[Model, RunReport]:
    """Adam + MSE over ``cfg.epochs`` epochs, then a single test-set evaluation.

    The final-epoch model is returned; the best validation epoch is only
    recorded. With ``normalize_targets`` the network learns standardized
    labels and the scaling is folded into fc2 before returning.
    """
    check_compatible(cfg.variant, dataset)
    started = time.perf_counter()
    model = build(cfg.variant, cfg.seed)
    opt = Adam(model.parameters(), cfg.adam)
    everything = np.arange(len(dataset))
    if cfg.split is None:
        test_idx = everything[:0]
        pool = everything
    else:
        _, _, test_idx = split(dataset, cfg.split, 1)
        pool = np.setdiff1d(everything, test_idx)
    scaler = TargetScaler(dataset.labels[pool]) if cfg.normalize_targets else None
    report = RunReport(cfg.variant.variant, cfg.seed, param_count(cfg.variant))

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.split is None:
            train_idx, val_idx = pool, pool[:0]
        else:
            train_idx, val_idx, _ = split(dataset, cfg.split, epoch)
        total, count, steps = 0.0, 0, 0
        for b, batch in enumerate(batches(train_idx, cfg.batch_size, cfg.seed, epoch)):
            target = dataset.labels[batch].astype(np.float64)
            if scaler is not None:
                target = scaler.encode(target)
            try:
                pred = model.forward(dataset.signals[batch], "train")
            except NonFiniteError as e:
                raise DivergenceError(epoch, b, float("nan")) from e
            loss, grad = mse_loss(pred.astype(np.float64), target)
            if not math.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            model.zero_grad()
            model.backward(grad.astype(model.dtype))
            opt.step()
            total += loss * batch.size
            count += batch.size
            steps += 1
        val_mae = float("nan")
        if val_idx.size:
            val_pred = predict(model, dataset, val_idx, cfg.batch_size)
            if scaler is not None:
                val_pred = scaler.decode(val_pred)
            val_mae = mae(val_pred, dataset.labels[val_idx], cfg.mae_kind)
        rec = EpochRecord(epoch, total / count, val_mae, steps, time.perf_counter() - t0)
        report.epochs.append(rec)
        if val_mae < report.best_val_mae:
            report.best_val_mae, report.best_val_epoch = val_mae, epoch
        log.info("epoch %d: train_loss=%.6g val_mae=%.4g", epoch, rec.train_loss, val_mae)

    if scaler is not None:
        scaler.fold_into(model)
    if test_idx.size:
        report.test_mae = evaluate(model, dataset, test_idx, cfg.mae_kind, cfg.batch_size)
    report.train_seconds = time.perf_counter() - started
    return model, report


def multi_run(dataset: EegDataset, cfg: TrainConfig, runs: int = 5):
    """Train ``runs`` times with seeds ``cfg.seed + k``; the split seed stays fixed.

    Returns ``(mean_mae, sample_std_mae, models, reports)``.
    """
    if runs < 2:
        raise ValueError("multi_run needs at least 2 runs")
    models, reports = [], []
    for k in range(runs):
        try:
            m, r = train(dataset, replace(cfg, seed=cfg.seed + k))
        except Exception as e:
            raise RunFailedError(k, e) from e
        models.append(m)
        reports.append(r)
    mean, std = mean_std([r.test_mae for r in reports])
    return mean, std, models, reports


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1))


def bench(model: Model, dataset: EegDataset, mode: str, indices=None,
          warmup: int = WARMUP_PASSES) -> BenchReport:
    """Time infer-mode forwards only.

    ``batch1``: 1000 single-sample forwards over the first 1000 indices.
    ``batch64``: every index (default: the whole dataset) in batches of 64.
    Inputs are sliced before the clock starts; ``warmup`` untimed passes run first.
    """
    check_compatible(model.config, dataset)
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if mode == "batch1":
        if idx.size < 1000:
            raise ValueError(f"batch1 mode needs 1000 samples, got {idx.size}")
        inputs = [dataset.signals[i:i + 1] for i in idx[:1000]]
    elif mode == "batch64":
        if idx.size < 1:
            raise ValueError("batch64 mode needs at least one sample")
        inputs = [dataset.signals[idx[i:i + 64]] for i in range(0, idx.size, 64)]
    else:
        raise ValueError(f"unknown bench mode {mode!r}")
    for i in range(warmup):
        model.forward(inputs[i % len(inputs)], "infer")
    start = time.perf_counter()
    for x in inputs:
        model.forward(x, "infer")
    elapsed = time.perf_counter() - start
    samples = sum(x.shape[0] for x in inputs)
    return BenchReport(mode, elapsed, samples, len(inputs), warmup)


SUMMARY_COLUMNS = ["variant", "seeds", "mean_mae", "std_mae", "params", "bench_seconds_per_1000"]


def summary_csv(rows: list[dict], columns=SUMMARY_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: row.get(k, "") for k in columns})
    return buf.getvalue()
