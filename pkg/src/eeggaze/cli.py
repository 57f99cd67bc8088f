"""Command line entry point: ``eeggaze <subcommand> [flags]``.

Every subcommand first prints its fully resolved configuration to stderr
as ``key=value`` lines; saving those lines to a file and passing it back
with ``--config`` reproduces the run. Flags given on the command line
override values from the config file.

Exit codes: 0 success, 1 runtime failure, 2 usage error.

CSV columns written by ``train`` and ``ablate``:
  variant, seeds, mean_mae, std_mae, params, bench_seconds_per_1000
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import harness as H
from . import model as M
from . import nn
from .optim import AdamConfig
from .rng import SplitMix64

THRESHOLD = 1e-4


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


class UsageError(Exception):
    pass


def _arch_flags(p: argparse.ArgumentParser, with_variant: bool = True) -> None:
    if with_variant:
        p.add_argument("--variant", choices=list(M.VARIANTS), default="base")
    p.add_argument("--spatial-filters", type=int, default=16)
    p.add_argument("--block-widths", type=_ints, default=(32, 64), help="comma-separated, e.g. 32,64")
    p.add_argument("--fc-width", type=int, default=256)
    p.add_argument("--conv-bias", action=argparse.BooleanOptionalAction, default=False)


def _split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", choices=["fixed", "per-epoch"], default="fixed")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--fractions", type=_floats, default=(0.7, 0.15, 0.15))


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    _arch_flags(p)
    _split_flags(p)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--decoupled-decay", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--normalize-targets", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--standardize-signals", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--mae", choices=["euclidean", "per-axis"], default="euclidean")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eeggaze", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="flat key=value file; command-line flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic EEGR dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=2560)
    p.add_argument("--channels", type=int, default=129)
    p.add_argument("--timesteps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--map-seed", type=int, default=0)

    p = sub.add_parser("train", help="train --runs models and report test MAE mean/std")
    _train_flags(p)
    p.add_argument("--out-checkpoint", help="EEGM path; with several runs, '.runK' is inserted")
    p.add_argument("--out-report", help="JSON-lines report path")

    p = sub.add_parser("eval", help="test MAE of a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mae", choices=["euclidean", "per-axis"], default="euclidean")
    p.add_argument("--variant", choices=list(M.VARIANTS), help="refuse checkpoints of another variant")
    p.add_argument("--subset", choices=["test", "all"], default="test")
    _split_flags(p)

    p = sub.add_parser("bench", help="time infer-mode forwards")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["batch1", "batch64"], required=True)
    p.add_argument("--subset", choices=["test", "all"], default="test",
                   help="batch64 samples; batch1 always uses the first 1000 samples")
    _split_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--tiny-model", action="store_true")
    p.add_argument("--layer", choices=list(LAYER_CHECKS))
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=THRESHOLD)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("params", help="exact learnable parameter count")
    p.add_argument("--channels", type=int, default=129)
    p.add_argument("--timesteps", type=int, default=500)
    _arch_flags(p)

    p = sub.add_parser("ablate", help="all four architecture variants, one CSV row each")
    _train_flags(p)
    p.set_defaults(runs=1)
    return parser


# ---------------------------------------------------------------------------
# config handling


def _config_tokens(path: str, parser: argparse.ArgumentParser, command: str) -> list[str]:
    sub = _subparser(parser, command)
    known = {a.dest: a for a in sub._actions if a.option_strings}
    tokens = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest == "command":
            continue
        if dest not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for {command}")
        flag = "--" + dest.replace("_", "-")
        if isinstance(known[dest], argparse.BooleanOptionalAction):
            if value.lower() not in ("true", "false"):
                raise UsageError(f"{path}:{lineno}: {key} must be true or false")
            tokens.append(flag if value.lower() == "true" else "--no-" + flag[2:])
        elif isinstance(known[dest], argparse._StoreTrueAction):
            if value.lower() == "true":
                tokens.append(flag)
        else:
            tokens.append(f"{flag}={value}")
    return tokens


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise AssertionError("no subparsers")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def resolved_config(args: argparse.Namespace) -> str:
    skip = {"config", "verbose"}
    lines = [f"command={args.command}"]
    lines += [f"{k}={_format_value(v)}" for k, v in sorted(vars(args).items())
              if k not in skip | {"command"} and v is not None]
    return "\n".join(lines)


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("-v", "--verbose", action="store_true")
    known, rest = pre.parse_known_args(argv)
    if known.config and rest and rest[0] in COMMANDS:
        # file tokens go right after the subcommand so command-line flags override them
        try:
            tokens = _config_tokens(known.config, parser, rest[0])
        except OSError as e:
            parser.error(f"cannot read config: {e}")
        except UsageError as e:
            parser.error(str(e))
        i = argv.index(rest[0])
        argv = argv[:i + 1] + tokens + argv[i + 1:]
    args = parser.parse_args(argv)
    _validate(parser, args)
    return args


def _validate(parser: argparse.ArgumentParser, a: argparse.Namespace) -> None:
    positive = ["epochs", "batch_size", "runs", "samples", "channels", "timesteps",
                "spatial_filters", "fc_width"]
    for name in positive:
        if getattr(a, name, 1) is not None and getattr(a, name, 1) < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")
    if getattr(a, "lr", 1) <= 0:
        parser.error("--lr must be positive")
    if getattr(a, "noise", 0) < 0:
        parser.error("--noise must be >= 0")
    if getattr(a, "eps", 1) <= 0:
        parser.error("--eps must be positive")
    widths = getattr(a, "block_widths", (1,))
    if not widths or min(widths) < 1:
        parser.error("--block-widths needs positive integers")
    try:
        if hasattr(a, "fractions"):
            D.SplitSpec(a.split, a.fractions, a.split_seed)
        if hasattr(a, "beta1"):
            AdamConfig(a.lr, a.beta1, a.beta2, a.weight_decay)
    except ValueError as e:
        parser.error(str(e))


# ---------------------------------------------------------------------------
# subcommands


def _model_config(a, channels: int, timesteps: int, variant: str | None = None) -> M.ModelConfig:
    return M.ModelConfig.for_variant(
        variant or a.variant, channels=channels, timesteps=timesteps,
        spatial_filters=a.spatial_filters, block_widths=a.block_widths, fc_width=a.fc_width,
        conv_bias=a.conv_bias)


def _load_data(a) -> D.EegDataset:
    ds = D.load(a.data)
    return ds.standardized() if getattr(a, "standardize_signals", False) else ds


def _train_config(a, ds: D.EegDataset, variant: str | None = None) -> H.TrainConfig:
    return H.TrainConfig(
        epochs=a.epochs, batch_size=a.batch_size,
        adam=AdamConfig(a.lr, a.beta1, a.beta2, a.weight_decay, decoupled=a.decoupled_decay),
        split=D.SplitSpec(a.split, a.fractions, a.split_seed), seed=a.seed,
        variant=_model_config(a, ds.channels, ds.timesteps, variant),
        normalize_targets=a.normalize_targets, mae_kind=a.mae)


def _subset(a, ds: D.EegDataset):
    if a.subset == "all":
        return np.arange(len(ds))
    return D.split(ds, D.SplitSpec(a.split, a.fractions, a.split_seed))[2]


def _run_training(cfg: H.TrainConfig, ds: D.EegDataset, runs: int):
    if runs == 1:
        model, rep = H.train(ds, cfg)
        return rep.test_mae, float("nan"), [model], [rep]
    return H.multi_run(ds, cfg, runs)


def _seeds(seed: int, runs: int) -> str:
    return str(seed) if runs == 1 else f"{seed}-{seed + runs - 1}"


def cmd_gen_data(a, out) -> int:
    ds = D.generate_synthetic(a.samples, a.channels, a.timesteps, a.seed, a.noise, a.map_seed)
    D.save(ds, a.out)
    print(f"wrote {len(ds)} samples ({a.channels}x{a.timesteps}) to {a.out}", file=out)
    return 0


def _checkpoint_path(base: str, k: int, runs: int) -> Path:
    p = Path(base)
    return p if runs == 1 else p.with_name(f"{p.stem}.run{k}{p.suffix}")


def cmd_train(a, out) -> int:
    ds = _load_data(a)
    cfg = _train_config(a, ds)
    mean, std, models, reports = _run_training(cfg, ds, a.runs)
    for k, (m, r) in enumerate(zip(models, reports)):
        logging.info("run %d seed %d: test_mae=%r", k, r.seed, r.test_mae)
        if a.out_checkpoint:
            M.save(m, _checkpoint_path(a.out_checkpoint, k, a.runs))
    logging.info("mean_mae=%r std_mae=%r", mean, std)
    if a.out_report:
        with open(a.out_report, "w", encoding="utf-8") as f:
            for r in reports:
                f.write(r.to_jsonl())
            f.write(json.dumps(dict(record="summary", variant=cfg.variant.variant,
                                    runs=a.runs, mean_mae=mean, std_mae=std,
                                    param_count=M.param_count(cfg.variant))) + "\n")
    out.write(H.summary_csv([dict(variant=cfg.variant.variant, seeds=_seeds(a.seed, a.runs),
                                  mean_mae=mean, std_mae=std, params=M.param_count(cfg.variant))]))
    return 0


def cmd_eval(a, out) -> int:
    ds = D.load(a.data)
    model = M.load(a.checkpoint)
    if a.variant and model.config.variant != a.variant:
        raise M.ConfigMismatchError(
            f"checkpoint is variant {model.config.variant!r}, run is configured for {a.variant!r}")
    print(repr(H.evaluate(model, ds, _subset(a, ds), a.mae)), file=out)
    return 0


def cmd_bench(a, out) -> int:
    ds = D.load(a.data)
    model = M.load(a.checkpoint)
    idx = np.arange(len(ds)) if a.mode == "batch1" else _subset(a, ds)
    out.write(H.bench(model, ds, a.mode, idx).to_jsonl())
    return 0


def _rand(shape, rng: SplitMix64) -> np.ndarray:
    return rng.normal(int(np.prod(shape))).reshape(shape)


def _conv_case(ky):
    def make(rng):
        layer = nn.Conv(3, 4, ky, rng, bias=True, dtype=np.float64)
        layer.bias.values[:] = _rand((4,), rng)
        return layer, _rand((2, 3, 20, 1), rng)
    return make


def _bn_case(rng):
    layer = nn.BatchNorm(3, np.float64)
    layer.gamma.values[:] = _rand((3,), rng)
    layer.beta.values[:] = _rand((3,), rng)
    return layer, _rand((4, 3, 6, 1), rng)


def _relu_case(rng):
    x = _rand((2, 3, 8, 1), rng)
    return nn.ReLU(), np.sign(x) * (np.abs(x) + 0.1)


LAYER_CHECKS = {
    "conv1x1": _conv_case(1),
    "conv9": _conv_case(9),
    "batchnorm": _bn_case,
    "relu": _relu_case,
    "avgpool": lambda rng: (nn.AvgPool(2), _rand((2, 3, 9, 1), rng)),
    "linear": lambda rng: (nn.Linear(6, 4, rng, np.float64), _rand((3, 6), rng)),
}

TINY_MODEL = dict(channels=4, timesteps=16, spatial_filters=4, block_widths=(4, 8), fc_width=8)


def cmd_gradcheck(a, out) -> int:
    layers = [a.layer] if a.layer else ([] if a.tiny_model else list(LAYER_CHECKS))
    results = []
    for name in layers:
        layer, x = LAYER_CHECKS[name](SplitMix64(a.seed))
        results.append((f"layer:{name}", nn.gradcheck(layer, x, a.eps, a.seed), 0))
    if a.tiny_model or not a.layer:
        for variant in M.VARIANTS:
            rng = SplitMix64(a.seed)
            cfg = M.ModelConfig.for_variant(variant, **TINY_MODEL)
            model = M.build(cfg, a.seed, np.float64)
            res = M.gradcheck_model(model, _rand((3, 4, 16, 1), rng), _rand((3, 2), rng), a.eps)
            results.append((f"model:{variant}", res.max_error, sum(res.skipped.values())))
    worst = 0.0
    for name, err, skipped in results:
        status = "ok" if err < a.threshold else "FAIL"
        print(f"{name}\t{err:.3e}\tskipped={skipped}\t{status}", file=out)
        worst = max(worst, err)
    return 0 if worst < a.threshold else 1


def cmd_params(a, out) -> int:
    print(M.param_count(_model_config(a, a.channels, a.timesteps)), file=out)
    return 0


def cmd_ablate(a, out) -> int:
    ds = _load_data(a)
    rows = []
    for variant in M.VARIANTS:
        cfg = _train_config(a, ds, variant)
        mean, std, models, _ = _run_training(cfg, ds, a.runs)
        row = dict(variant=variant, seeds=_seeds(a.seed, a.runs), mean_mae=mean, std_mae=std,
                   params=M.param_count(cfg.variant))
        if len(ds) >= 1000:
            row["bench_seconds_per_1000"] = H.bench(models[0], ds, "batch1").seconds_per_1000
        else:
            logging.warning("fewer than 1000 samples; batch-1 timing left empty for %s", variant)
        rows.append(row)
    out.write(H.summary_csv(rows))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
    "gradcheck": cmd_gradcheck, "params": cmd_params, "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None, out=None, err=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = parse(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=err)
    print("# resolved config", file=err)
    print(resolved_config(args), file=err)
    try:
        return COMMANDS[args.command](args, out)
    except (OSError, ValueError, RuntimeError, FloatingPointError, M.FormatError) as e:
        print(f"error: {e}", file=err)
        return 1
