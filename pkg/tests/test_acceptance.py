"""Exit criteria for the package, one test per criterion.

Run with ``pytest tests/test_acceptance.py``; a PASS/FAIL line per
criterion is printed in the terminal summary. Criteria 6 and 7 train
several models and take a few minutes on one CPU core.
"""

import io
import json
import time

import numpy as np
import pytest

from eeggaze import data as D
from eeggaze import harness as H
from eeggaze import model as M
from eeggaze import nn
from eeggaze.cli import LAYER_CHECKS, TINY_MODEL, main
from eeggaze.optim import AdamConfig
from eeggaze.rng import SplitMix64

CHANCE = H.centroid_distance(*D.SCREEN)
PAPER_RECIPE = AdamConfig()  # lr 1e-4, betas 0.9/0.999, weight decay 5e-4

# reduced-width base architecture for the learnability runs
LEARN_DATA = dict(n=2560, channels=32, timesteps=128, seed=3, noise_sigma=1.0)
LEARN_ARCH = dict(channels=32, timesteps=128, spatial_filters=8, block_widths=(16, 32), fc_width=64)
LEARN_EPOCHS = 30
BUDGET_6 = 20 * 60.0


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out=out, err=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def learn_data():
    return D.generate_synthetic(**LEARN_DATA)


def learn_config(variant: str, seed: int = 0) -> H.TrainConfig:
    return H.TrainConfig(epochs=LEARN_EPOCHS, adam=PAPER_RECIPE, seed=seed,
                         split=D.SplitSpec("per-epoch", seed=0),
                         variant=M.ModelConfig.for_variant(variant, **LEARN_ARCH))


def test_01_parameter_budget(criterion):
    t0 = time.perf_counter()
    code, out, _ = cli("params", "--variant", "base")
    dt = time.perf_counter() - t0
    n = int(out)
    criterion(1, code == 0 and 2.03e6 <= n <= 2.11e6 and dt < 1.0,
              f"base parameters {n} in [2.03e6, 2.11e6] (reported 2.07e6), {dt:.3f}s")


def test_02_equal_convs_delta(criterion):
    t0 = time.perf_counter()
    base = int(cli("params", "--variant", "base")[1])
    equal = int(cli("params", "--variant", "equal-convs")[1])
    dt = time.perf_counter() - t0
    delta = equal - base
    criterion(2, 4.0e4 <= delta <= 6.0e4 and dt < 1.0,
              f"equal-convs minus base = {delta} in [4.0e4, 6.0e4], {dt:.3f}s")


def test_03_gradient_correctness(criterion):
    t0 = time.perf_counter()
    errors = {}
    skipped = checked = 0
    for name, make in LAYER_CHECKS.items():
        layer, x = make(SplitMix64(0))
        errors[f"layer:{name}"] = nn.gradcheck(layer, x, eps=1e-4)
    for variant in M.VARIANTS:
        rng = SplitMix64(1)
        m = M.build(M.ModelConfig.for_variant(variant, **TINY_MODEL), seed=0, dtype=np.float64)
        res = M.gradcheck_model(m, rng.normal(3 * 4 * 16).reshape(3, 4, 16, 1),
                                rng.normal(6).reshape(3, 2), eps=1e-4)
        errors[f"model:{variant}"] = res.max_error
        skipped += sum(res.skipped.values())
        checked += sum(res.checked.values())
    code, _, _ = cli("gradcheck", "--tiny-model")
    dt = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    criterion(3, errors[worst] < 1e-4 and code == 0 and dt < 120 and skipped <= 0.01 * checked,
              f"max relative error {errors[worst]:.2e} ({worst}) < 1e-4 over {len(errors)} checks; "
              f"{skipped}/{checked + skipped} model entries at ReLU kinks excluded; {dt:.1f}s")


def test_04_shape_cascade(criterion):
    model = M.build(M.ModelConfig(), seed=0)
    shapes = {}
    out = model.forward(np.zeros((1, 129, 500, 1), np.float32), "infer",
                        hook=lambda name, a: shapes.setdefault(name, a.shape))
    got = [shapes["spatial"][1:3], shapes["block1"][1:3], shapes["block2"][1:3],
           shapes["flatten"][1], out.shape]
    want = [(16, 500), (32, 250), (64, 125), 8000, (1, 2)]
    criterion(4, got == want, f"intermediates {got}")


def test_05_overfit(criterion):
    ds = D.generate_synthetic(32, channels=8, timesteps=32, seed=1, noise_sigma=0.0)
    cfg = H.TrainConfig(epochs=500, adam=PAPER_RECIPE, split=None,
                        variant=M.ModelConfig(channels=8, timesteps=32, spatial_filters=8,
                                              block_widths=(8, 16), fc_width=32))
    t0 = time.perf_counter()
    _, rep = H.train(ds, cfg)
    dt = time.perf_counter() - t0
    ratio = rep.epochs[-1].train_loss / rep.epochs[0].train_loss
    criterion(5, ratio <= 0.01 and dt < 300,
              f"final/epoch-1 train MSE = {ratio:.2e} <= 1e-2 after 500 epochs, {dt:.1f}s")


@pytest.mark.slow
def test_06_learnability(criterion, learn_data):
    t0 = time.perf_counter()
    _, rep = H.train(learn_data, learn_config("base"))
    dt = time.perf_counter() - t0
    criterion(6, rep.test_mae < 0.25 * CHANCE and dt < BUDGET_6,
              f"test MAE {rep.test_mae:.2f} < 0.25 x chance {CHANCE:.2f} = {0.25 * CHANCE:.2f}, {dt:.0f}s")


@pytest.mark.slow
def test_07_ablation_direction(criterion, learn_data):
    t0 = time.perf_counter()
    base, _, _, base_reps = H.multi_run(learn_data, learn_config("base"), runs=3)
    nosp, _, _, nosp_reps = H.multi_run(learn_data, learn_config("no-spatial"), runs=3)
    dt = time.perf_counter() - t0
    criterion(7, base <= nosp + 0.10 * CHANCE and dt <= 3 * BUDGET_6,
              f"mean MAE base {base:.2f} <= no-spatial {nosp:.2f} + {0.10 * CHANCE:.2f} "
              f"(seeds 0-2), {dt:.0f}s")


def test_08_multi_run_protocol(criterion, tmp_path):
    data = tmp_path / "d.eegr"
    cli("gen-data", "--out", str(data), "--samples", "200", "--channels", "4", "--timesteps", "16",
        "--seed", "4", "--noise", "0.5")
    args = ["train", "--data", str(data), "--runs", "5", "--epochs", "3", "--split", "per-epoch",
            "--spatial-filters", "4", "--block-widths", "4,8", "--fc-width", "8", "--seed", "7"]

    def once(tag):
        report = tmp_path / f"{tag}.jsonl"
        code, out, _ = cli(*args, "--out-report", str(report), "--out-checkpoint", str(tmp_path / f"{tag}.eegm"))
        recs = [json.loads(l) for l in report.read_text().splitlines()]
        for r in recs:
            r.pop("seconds", None)
            r.pop("train_seconds", None)
        ckpts = [(tmp_path / f"{tag}.run{k}.eegm").read_bytes() for k in range(5)]
        return code, out, recs, ckpts

    a, b = once("a"), once("b")
    runs = [r for r in a[2] if r["record"] == "run"]
    summary = a[2][-1]
    maes = [r["test_mae"] for r in runs]
    ok = (a[0] == 0 and len(runs) == 5 and [r["seed"] for r in runs] == [7, 8, 9, 10, 11]
          and summary["mean_mae"] == pytest.approx(np.mean(maes))
          and summary["std_mae"] == pytest.approx(np.std(maes, ddof=1))
          and a[1:] == b[1:])
    criterion(8, ok, f"5 run reports + mean {summary['mean_mae']:.2f} / sample std "
                     f"{summary['std_mae']:.3f}; rerun bit-identical: {a[1:] == b[1:]}")


def test_09_benchmark_protocol(criterion, tmp_path):
    ds = D.generate_synthetic(1000, 129, 500, seed=5)
    data, ckpt = tmp_path / "bench.eegr", tmp_path / "base.eegm"
    D.save(ds, data)
    M.save(M.build(M.ModelConfig(), seed=0), ckpt)
    del ds
    reps = {}
    for mode in ("batch1", "batch64"):
        code, out, _ = cli("bench", "--data", str(data), "--checkpoint", str(ckpt), "--mode", mode)
        assert code == 0
        reps[mode] = json.loads(out)
    b1, b64 = reps["batch1"], reps["batch64"]
    consistent = all(r["seconds_per_1000"] == pytest.approx(r["total_seconds"] / (r["samples"] / 1000))
                     for r in reps.values())
    ok = (b1["forward_calls"] == 1000 and b64["samples"] == 150 and consistent
          and b64["samples_per_second"] > b1["samples_per_second"])
    criterion(9, ok, f"batch1 {b1['seconds_per_1000']:.3f}s/1k ({b1['samples_per_second']:.0f}/s), "
                     f"batch64 test set {b64['total_seconds']:.3f}s ({b64['samples_per_second']:.0f}/s)")


def test_10_format_round_trips(criterion, tmp_path):
    ds = D.generate_synthetic(7, 5, 12, seed=2, noise_sigma=1.0)
    D.save(ds, tmp_path / "d.eegr")
    back = D.load(tmp_path / "d.eegr")
    eegr_ok = back.signals.tobytes() == ds.signals.tobytes() and back.labels.tobytes() == ds.labels.tobytes()

    m = M.build(M.ModelConfig(channels=5, timesteps=12, spatial_filters=4, block_widths=(4, 8),
                              fc_width=8, conv_bias=True), seed=3)
    m.forward(ds.signals, "train")  # moves running stats off their initial values
    blob = M.serialize(m)
    m2 = M.deserialize(blob)
    eegm_ok = all(a.values.tobytes() == b.values.tobytes()
                  for (_, a), (_, b) in zip(m.parameters() + m.buffers(), m2.parameters() + m2.buffers()))
    stats_moved = any(np.any(t.values != (0 if "mean" in n else 1)) for n, t in m2.buffers())

    def error_of(fn, data):
        try:
            fn(data)
        except M.FormatError as e:
            return type(e)
        return None

    bad_magic = b"XXXX" + blob[4:]
    bad_version = blob[:4] + (7).to_bytes(4, "little") + blob[8:]
    raw = D.to_bytes(ds)
    errs = {
        "eegm magic": error_of(M.deserialize, bad_magic),
        "eegm version": error_of(M.deserialize, bad_version),
        "eegm truncated": error_of(M.deserialize, blob[:-3]),
        "eegr magic": error_of(D.from_bytes, b"XXXX" + raw[4:]),
        "eegr version": error_of(D.from_bytes, raw[:4] + (7).to_bytes(4, "little") + raw[8:]),
        "eegr truncated": error_of(D.from_bytes, raw[:-3]),
    }
    distinct = (errs["eegm magic"] is M.BadMagicError and errs["eegm version"] is M.VersionError
                and errs["eegm truncated"] is M.TruncatedError and errs["eegr magic"] is M.BadMagicError
                and errs["eegr version"] is M.VersionError and errs["eegr truncated"] is M.TruncatedError)
    criterion(10, eegr_ok and eegm_ok and stats_moved and distinct,
              f"EEGR exact={eegr_ok}, EEGM exact incl. running stats={eegm_ok}, "
              f"errors {', '.join(f'{k}->{v.__name__ if v else None}' for k, v in errs.items())}")


def test_11_split_protocol(criterion):
    ok = True
    for seed in range(5):
        spec = D.SplitSpec("per-epoch", seed=seed)
        parts = [D.split(1000, spec, epoch) for epoch in range(1, 6)]
        tests_fixed = all(np.array_equal(parts[0][2], p[2]) for p in parts)
        trains_differ = all(not np.array_equal(parts[i][0], parts[j][0])
                            for i in range(5) for j in range(i + 1, 5))
        vals_differ = all(not np.array_equal(parts[i][1], parts[j][1])
                          for i in range(5) for j in range(i + 1, 5))
        disjoint = all(np.array_equal(np.sort(np.concatenate(p)), np.arange(1000)) for p in parts)
        ok &= tests_fixed and trains_differ and vals_differ and disjoint
    criterion(11, ok, "per-epoch split: test fixed, train/val differ across 5 epochs, seeds 0-4, N=1000")
