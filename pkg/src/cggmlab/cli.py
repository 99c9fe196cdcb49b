"""Command-line entry point.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data, harness
from .config import DEFAULTS, FIELD_TYPES, build_config
from .errors import CggmError, ConfigError
from .model import load_model


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_config_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--json", action="store_true", help="print a machine-readable summary on stdout")
    for key in FIELD_TYPES:
        flag = "--lambda" if key == "lam" else f"--{key.replace('_', '-')}"
        p.add_argument(flag, dest=key, default=None, metavar=type(getattr(DEFAULTS, key)).__name__.upper(),
                       help=f"default: {getattr(DEFAULTS, key)!r}")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cggmlab", description="Classifier-guided gradient modulation lab")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("generate", help="generate and save a synthetic dataset")
    _add_config_flags(p)
    p = sub.add_parser("train", help="train one strategy")
    _add_config_flags(p)
    p = sub.add_parser("sweep", help="sweep rho or lambda against the joint baseline")
    _add_config_flags(p)
    p.add_argument("--axis", choices=sorted(harness.SWEEP_AXES), default="rho")
    p.add_argument("--values", help="comma-separated grid (default: built-in grid for the axis)")
    p = sub.add_parser("probe", help="classifier vs unimodal gradient cosine")
    _add_config_flags(p)
    p.add_argument("--checkpoint", help="probe a saved model instead of training one")
    p = sub.add_parser("compare", help="run several strategies and tabulate them")
    _add_config_flags(p)
    p.add_argument("--strategies", default="joint,cggm",
                   help="comma-separated, e.g. joint,cggm,mrd,mslr,unimodal:1")
    return parser


def _config(args):
    overrides = {k: getattr(args, k) for k in FIELD_TYPES}
    return build_config(args.config, **overrides)


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def _generate(args):
    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = data.generate(cfg.data_spec())
    path = out / "dataset.cggd"
    data.save(ds, path)
    payload = {"path": str(path), "train": int(ds.train_idx.size), "test": int(ds.test_idx.size)}
    _emit(args, payload, f"wrote {path} ({ds.train_idx.size} train / {ds.test_idx.size} test rows)")


def _train(args):
    cfg = _config(args)
    summary = harness.run(cfg)
    fused = summary["final"]["fused"]
    text = f"{summary['strategy']}: " + ", ".join(f"{k}={v:.4f}" for k, v in fused.items())
    _emit(args, summary, text + f"\nrecords: {summary['records']}")


def _sweep(args):
    cfg = _config(args)
    values = None
    if args.values:
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"invalid --values {args.values!r}") from None
    rows = harness.sweep(cfg, args.axis, values)
    metric = next(k for k in rows[0] if k not in ("value", "delta", "summary"))
    payload = [{k: r[k] for k in ("value", metric, "delta")} for r in rows]
    lines = [f"{args.axis}={r['value']:g}: {metric}={r[metric]:.4f} (delta {r['delta']:+.4f})" for r in rows]
    _emit(args, payload, "\n".join(lines))


def _probe(args):
    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = harness.load_dataset(cfg)
    if args.checkpoint:
        model = load_model(args.checkpoint)
        mods = list(range(model.config.modality_count))
        if model.config.modality_count != dataset.spec.modalities:
            mods = [cfg.modality - 1]
    else:
        result = harness.train(cfg, out, dataset)
        model = result.model
        mods = [cfg.modality - 1] if cfg.strategy == "unimodal" else list(range(dataset.spec.modalities))
    rows = harness.probe_run(model, dataset, cfg.batch_size, modalities=mods)
    harness.write_probe(rows, out / "probe.csv")
    _emit(args, rows, "\n".join(f"modality {r['modality']}: mean cos {r['mean_cos']:.4f}" for r in rows))


def _compare(args):
    cfg = _config(args)
    labels = [s.strip() for s in args.strategies.split(",") if s.strip()]
    if not labels:
        raise ConfigError("no strategies given")
    header, rows = harness.compare(cfg, labels)
    payload = [dict(zip(header, r)) for r in rows]
    _emit(args, payload, "\n".join(",".join(r) for r in [header] + rows))


COMMANDS = {"generate": _generate, "train": _train, "sweep": _sweep, "probe": _probe, "compare": _compare}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\ncggmlab: error: a subcommand is required")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CggmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
