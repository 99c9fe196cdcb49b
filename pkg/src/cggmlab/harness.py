"""Experiment orchestration: training runs, baselines, probes and sweeps.

Every run writes into its own directory:

``records.csv``
    one row per iteration, columns ``iter, task_loss, lgm, eps_i, braw_i,
    bclamp_i, gnorm_i, cos_i`` (i = 1..M).
``eval.csv``
    held-out metrics every ``eval_interval`` epochs.
``summary.json``
    config echo, run id and final held-out metrics.
``model.cggm``
    checkpoint of the trained model.

Every file is a pure function of the config, so reruns are byte-identical.
Wall time is reported only in the summary returned by :func:`run`.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import tensor as T
from .cggm import TrainRecord, new_metric_state, training_step
from .config import ExperimentConfig
from .errors import ConfigError
from .metrics import report
from .model import MultimodalModel, flat_head_gradient, save_model
from .optim import Optimizer

DEFAULT_RHO_GRID = (0.50, 0.75, 1.00, 1.20, 1.50, 1.75, 2.00)
DEFAULT_LAMBDA_GRID = (0.01, 0.05, 0.10, 0.15, 0.20, 0.25)
SWEEP_AXES = {"rho": "rho", "lambda": "lam"}


def fmt(x) -> str:
    return format(float(x), ".17g")


def record_columns(m: int) -> list[str]:
    cols = ["iter", "task_loss", "lgm"]
    for prefix in ("eps", "braw", "bclamp", "gnorm", "cos"):
        cols += [f"{prefix}_{i}" for i in range(1, m + 1)]
    return cols


def record_row(r: TrainRecord) -> list[str]:
    row = [str(r.iteration), fmt(r.task_loss), fmt(r.lgm)]
    for values in (r.eps, r.braw, r.bclamp, r.gnorm, r.cos):
        row += [fmt(v) for v in values]
    return row


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- training
@dataclass
class RunResult:
    summary: dict
    model: MultimodalModel
    dataset: data_mod.Dataset
    records: list
    out_dir: Path
    wall_time_s: float = 0.0


def load_dataset(config: ExperimentConfig) -> data_mod.Dataset:
    if config.dataset:
        return data_mod.load(config.dataset)
    return data_mod.generate(config.data_spec())


def _modalities(config: ExperimentConfig, dataset) -> list[int]:
    m = dataset.spec.modalities
    if config.strategy == "unimodal":
        if not 1 <= config.modality <= m:
            raise ConfigError(f"modality must lie in 1..{m}")
        return [config.modality - 1]
    if config.strategy == "mslr" and len(config.mslr_lrs) != m:
        raise ConfigError(f"mslr_lrs needs one learning rate per modality ({m})")
    return list(range(m))


def evaluate(model: MultimodalModel, dataset, split: str, modalities) -> dict:
    """Held-out metrics for the fused prediction and every classifier."""
    xs, y = dataset.take(dataset.split(split))
    xs = [xs[i] for i in modalities]
    task = model.config.task
    if task == "classification":
        y = y.astype(np.int64)
    fwd = model.forward(xs)
    classes = model.config.output_dim
    return {
        "fused": report(task, fwd.prediction.data, y, classes),
        "classifiers": {str(i + 1): report(task, p.data, y, classes)
                        for i, p in zip(modalities, fwd.classifier_predictions)},
    }


def train(config: ExperimentConfig, out_dir=None, dataset=None) -> RunResult:
    """Deterministic end-to-end run for one strategy; writes the run directory."""
    started = time.perf_counter()
    out = Path(out_dir if out_dir is not None else config.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = dataset if dataset is not None else load_dataset(config)
    mods = _modalities(config, dataset)
    spec = dataset.spec
    model = MultimodalModel(config.model_config([spec.feature_dims[i] for i in mods], spec.output_dim, spec.task))
    optimizer = Optimizer(model.param_groups(), config.optimizer_config())
    cggm_cfg = config.cggm_config()
    state = new_metric_state(model, config.metric_ema)
    drop_rng = np.random.default_rng((config.seed, 1))

    records: list[TrainRecord] = []
    evals = []
    for epoch in range(config.epochs):
        optimizer.set_epoch(epoch)
        for xs, y in data_mod.batches(dataset, "train", config.batch_size, (config.seed, 0, epoch)):
            xs = [xs[i] for i in mods]
            drop = None
            if config.strategy == "mrd":
                drop = list(drop_rng.random(len(mods)) < config.mrd_p)
            prev = records[-1].braw if records else None
            records.append(training_step(model, (xs, y), state, optimizer, cggm_cfg,
                                         drop=drop, previous_raw_b=prev))
        last = epoch + 1 == config.epochs
        if last or (config.eval_interval and (epoch + 1) % config.eval_interval == 0):
            evals.append((epoch + 1, evaluate(model, dataset, "test", mods)))

    m = len(mods)
    write_csv(out / "records.csv", record_columns(m), [record_row(r) for r in records])
    metric_names = list(evals[-1][1]["fused"])
    eval_header = ["epoch"] + [f"fused_{k}" for k in metric_names]
    eval_header += [f"cls_{i + 1}_{k}" for i in mods for k in metric_names]
    eval_rows = []
    for epoch, ev in evals:
        row = [str(epoch)] + [fmt(ev["fused"][k]) for k in metric_names]
        row += [fmt(ev["classifiers"][str(i + 1)][k]) for i in mods for k in metric_names]
        eval_rows.append(row)
    write_csv(out / "eval.csv", eval_header, eval_rows)
    save_model(model, out / "model.cggm")

    summary = {
        "run_id": config.run_id(),
        "strategy": config.label(),
        "config": config.to_dict(),
        "iterations": len(records),
        "final": evals[-1][1],
        "records": "records.csv",
    }
    write_json(out / "summary.json", summary)
    return RunResult(summary, model, dataset, records, out, time.perf_counter() - started)


def run(config: ExperimentConfig, out_dir=None) -> dict:
    """Train and return the summary with the record log path and wall time."""
    result = train(config, out_dir)
    summary = dict(result.summary)
    summary["records"] = str(result.out_dir / "records.csv")
    summary["wall_time_s"] = result.wall_time_s
    return summary


# -------------------------------------------------------------------- probe
def fusion_unimodal_gradient(model: MultimodalModel, reps, targets, modality: int) -> np.ndarray:
    """Fusion-head final-layer gradient with every other representation zeroed."""
    kept = [r if j == modality else T.Tensor(np.zeros(r.shape)) for j, r in enumerate(reps)]
    fused, pred = model.forward_fusion(kept)
    return flat_head_gradient(model.config.loss_kind, fused, pred, targets).data


def classifier_gradient(model: MultimodalModel, rep, targets, modality: int) -> np.ndarray:
    cls = model.classifiers[modality]
    z = cls.features(T.detach(rep))
    return flat_head_gradient(model.config.loss_kind, z, cls.out(z), targets).data


def unimodal_gradient_probe(model: MultimodalModel, batch, modality: int) -> float:
    """Cosine between classifier ``modality``'s final-layer gradient and the
    fusion head's gradient when only that modality is fed (0-based index).

    Nothing is mutated: both gradients are evaluated in closed form.
    """
    xs, targets = batch
    if not 0 <= modality < model.config.modality_count:
        raise ConfigError(f"modality index {modality} out of range")
    reps = [T.detach(r) for r in model.forward_encoders(xs)]
    g_cls = classifier_gradient(model, reps[modality], targets, modality)
    g_uni = fusion_unimodal_gradient(model, reps, targets, modality)
    return T.cosine_similarity(T.Tensor(g_uni), T.Tensor(g_cls)).item()


def probe_run(model: MultimodalModel, dataset, batch_size: int = 64, split: str = "test", modalities=None) -> list[dict]:
    """Probe statistics per modality over every batch of a split."""
    mods = modalities if modalities is not None else list(range(model.config.modality_count))
    rows = []
    values = {i: [] for i in range(len(mods))}
    for xs, y in data_mod.batches(dataset, split, batch_size):
        xs = [xs[i] for i in mods]
        for i in values:
            values[i].append(unimodal_gradient_probe(model, (xs, y), i))
    for i, vals in values.items():
        v = np.array(vals)
        rows.append({"modality": mods[i] + 1, "mean_cos": float(v.mean()), "min_cos": float(v.min()),
                     "max_cos": float(v.max()), "batches": int(v.size)})
    return rows


def write_probe(rows, path):
    header = ["modality", "mean_cos", "min_cos", "max_cos", "batches"]
    write_csv(path, header, [[str(r["modality"]), fmt(r["mean_cos"]), fmt(r["min_cos"]), fmt(r["max_cos"]),
                              str(r["batches"])] for r in rows])


# ------------------------------------------------------------ sweep/compare
def headline(summary: dict) -> tuple[str, float]:
    fused = summary["final"]["fused"]
    key = "accuracy" if "accuracy" in fused else "mae"
    return key, fused[key]


def sweep(base: ExperimentConfig, axis: str, values=None, out_dir=None) -> list[dict]:
    """Run CGGM for each value of rho or lambda plus a joint baseline."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}")
    if values is None:
        values = DEFAULT_RHO_GRID if axis == "rho" else DEFAULT_LAMBDA_GRID
    values = [float(v) for v in values]
    if len(values) < 2:
        raise ConfigError("a sweep needs at least two values")
    out = Path(out_dir if out_dir is not None else base.out)
    dataset = load_dataset(base)
    baseline = train(base.replace(strategy="joint"), out / "baseline", dataset).summary
    metric, base_value = headline(baseline)
    rows = []
    for v in values:
        cfg = base.replace(strategy="cggm", **{SWEEP_AXES[axis]: v})
        summary = train(cfg, out / f"{axis}_{fmt(v)}", dataset).summary
        _, value = headline(summary)
        rows.append({"value": v, metric: value, "delta": value - base_value, "summary": summary})
    write_csv(out / "sweep.csv", [axis, metric, "delta"],
              [[fmt(r["value"]), fmt(r[metric]), fmt(r["delta"])] for r in rows])
    write_json(out / "sweep.json", {"axis": axis, "metric": metric, "baseline": base_value,
                                    "rows": [{k: r[k] for k in ("value", metric, "delta")} for r in rows]})
    return rows


def parse_strategy(label: str, base: ExperimentConfig) -> ExperimentConfig:
    name, _, arg = label.partition(":")
    if name == "unimodal":
        return base.replace(strategy="unimodal", modality=int(arg or base.modality))
    if arg:
        raise ConfigError(f"strategy {name!r} takes no argument")
    return base.replace(strategy=name)


def compare(base: ExperimentConfig, strategies, out_dir=None) -> tuple[list[str], list[list[str]]]:
    """One row per strategy with identical columns; missing classifier branches are left blank."""
    out = Path(out_dir if out_dir is not None else base.out)
    dataset = load_dataset(base)
    m = dataset.spec.modalities
    summaries = []
    for label in strategies:
        cfg = parse_strategy(label, base)
        summaries.append((cfg.label(), train(cfg, out / cfg.label().replace(":", "_"), dataset).summary))
    metric_names = list(summaries[0][1]["final"]["fused"])
    header = ["strategy"] + [f"fused_{k}" for k in metric_names]
    header += [f"cls_{i}_{k}" for i in range(1, m + 1) for k in metric_names]
    rows = []
    for label, s in summaries:
        row = [label] + [fmt(s["final"]["fused"][k]) for k in metric_names]
        for i in range(1, m + 1):
            cls = s["final"]["classifiers"].get(str(i))
            row += [fmt(cls[k]) if cls else "" for k in metric_names]
        rows.append(row)
    write_csv(out / "compare.csv", header, rows)
    return header, rows
