import csv
import json

import numpy as np
import pytest

from cggmlab import harness
from cggmlab.cli import main
from cggmlab.config import ExperimentConfig, build_config, read_config_file, write_config_file
from cggmlab.data import SyntheticSpec, batches, generate, save
from cggmlab.errors import ConfigError
from cggmlab.model import ModelConfig, MultimodalModel

TINY = dict(n_samples=120, epochs=2, batch_size=32, hidden_dim=8)


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw})


def read_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- config
def test_config_file_round_trip(tmp_path):
    cfg = tiny(lam=0.05, feature_dims=(4, 4, 4), strategy="mrd")
    write_config_file(cfg, tmp_path / "c.toml")
    assert build_config(tmp_path / "c.toml") == cfg


def test_config_rejects_unknown_keys_and_tables(tmp_path):
    (tmp_path / "a.toml").write_text("learning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "a.toml")
    (tmp_path / "b.toml").write_text("[model]\nhidden_dim = 4\n")
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "b.toml")


def test_overrides_beat_file(tmp_path):
    (tmp_path / "c.toml").write_text("seed = 3\nlam = 0.1\n")
    cfg = build_config(tmp_path / "c.toml", seed="7")
    assert cfg.seed == 7 and cfg.lam == 0.1


@pytest.mark.parametrize("kw", [dict(strategy="ogm"), dict(epochs=0), dict(strategy="mslr"),
                                dict(strategy="unimodal", modality=4), dict(metric_ema=1.0)])
def test_invalid_experiment(kw):
    with pytest.raises(ConfigError):
        tiny(**kw)


# --------------------------------------------------------------- training
def test_records_schema_and_order(tmp_path):
    result = harness.train(tiny(), tmp_path)
    rows = read_rows(tmp_path / "records.csv")
    assert rows[0] == harness.record_columns(3)
    assert [int(r[0]) for r in rows[1:]] == list(range(1, len(rows)))
    assert len(rows) - 1 == result.summary["iterations"] == 2 * 3  # 96 train rows, batch 32
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["config"]["lam"] == 0.2 and set(summary["final"]) == {"fused", "classifiers"}
    assert (tmp_path / "model.cggm").exists()
    assert result.wall_time_s > 0 and "wall_time_s" not in summary


def test_cggm_switches_off_equals_joint(tmp_path):
    a = harness.train(tiny(strategy="joint"), tmp_path / "a")
    b = harness.train(tiny(strategy="cggm", magnitude=False, direction=False), tmp_path / "b")
    assert (tmp_path / "a/records.csv").read_bytes() == (tmp_path / "b/records.csv").read_bytes()
    assert a.summary["final"] == b.summary["final"]


def test_zero_lambda_equals_magnitude_only(tmp_path):
    a = harness.train(tiny(strategy="cggm", lam=0.0), tmp_path / "a")
    b = harness.train(tiny(strategy="cggm", direction=False), tmp_path / "b")
    for name in ("records.csv", "eval.csv", "model.cggm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a.summary["final"] == b.summary["final"]


def test_joint_and_cggm_share_data_order_and_init(tmp_path):
    a = harness.train(tiny(strategy="joint", epochs=1), tmp_path / "a")
    b = harness.train(tiny(strategy="cggm", epochs=1), tmp_path / "b")
    assert a.records[0].task_loss == b.records[0].task_loss
    assert a.records[0].eps == b.records[0].eps


def test_strategies_run(tmp_path):
    for cfg in (tiny(strategy="mrd"), tiny(strategy="mslr", mslr_lrs=(1e-4, 1e-3, 1e-3)),
                tiny(strategy="unimodal", modality=2), tiny(task="regression")):
        summary = harness.train(cfg, tmp_path / cfg.label().replace(":", "_") / cfg.task).summary
        assert summary["final"]["fused"]


def test_unimodal_oracle(tmp_path):
    base = ExperimentConfig(informativeness=(1.0, 0.0), feature_dims=(8, 8), noise=0.1, n_samples=400,
                            epochs=15, hidden_dim=8, strategy="unimodal", lr=1e-2, eval_interval=0)
    acc = [harness.train(base.replace(modality=i), tmp_path / str(i)).summary["final"]["fused"]["accuracy"]
           for i in (1, 2)]
    assert acc[0] >= 0.95
    assert acc[1] <= 0.25 + 0.15  # chance, 80 test rows


def test_determinism(tmp_path):
    cfg = tiny(epochs=1)
    harness.train(cfg, tmp_path / "a")
    harness.train(cfg, tmp_path / "b")
    for name in ("records.csv", "eval.csv", "summary.json", "model.cggm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# ------------------------------------------------------------------ probe
def test_probe_is_pure_and_in_range():
    ds = generate(SyntheticSpec(n_samples=80))
    model = MultimodalModel(ModelConfig(input_dims=(8, 8, 8), output_dim=4, hidden_dim=8))
    before = model.state()
    batch = batches(ds, "test", 16)[0]
    cos = harness.unimodal_gradient_probe(model, batch, 1)
    assert -1 <= cos <= 1
    assert all(a.tobytes() == b.data.tobytes() for a, b in zip(before, model.parameters()))
    with pytest.raises(ConfigError):
        harness.unimodal_gradient_probe(model, batch, 3)


def test_probe_single_modality_matches_fusion_gradient():
    from cggmlab import tensor as T
    from cggmlab.model import flat_head_gradient
    ds = generate(SyntheticSpec(informativeness=(0.8,), feature_dims=(8,), n_samples=40))
    model = MultimodalModel(ModelConfig(input_dims=(8,), output_dim=4, hidden_dim=8))
    xs, y = batches(ds, "train", 16)[0]
    reps = model.forward_encoders(xs)
    fused, pred = model.forward_fusion(reps)
    g = flat_head_gradient("cross-entropy", fused, pred, y).data
    g_uni = harness.fusion_unimodal_gradient(model, reps, y, 0)
    assert np.array_equal(g, g_uni)
    assert T.cosine_similarity(T.Tensor(g_uni), T.Tensor(g)).item() == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------- sweep/compare
def test_sweep_single_value_rejected(tmp_path):
    with pytest.raises(ConfigError):
        harness.sweep(tiny(), "rho", [1.0], tmp_path)


def test_sweep_csv(tmp_path):
    rows = harness.sweep(tiny(epochs=1), "lambda", [0.0, 0.2], tmp_path)
    table = read_rows(tmp_path / "sweep.csv")
    assert table[0] == ["lambda", "accuracy", "delta"] and len(table) == 3
    assert rows[0]["value"] == 0.0


def test_compare_identical_columns(tmp_path):
    header, rows = harness.compare(tiny(epochs=1), ["joint", "cggm", "unimodal:1"], tmp_path)
    table = read_rows(tmp_path / "compare.csv")
    assert table[0] == header and all(len(r) == len(header) for r in table)
    assert [r[0] for r in table[1:]] == ["joint", "cggm", "unimodal:1"]
    assert table[3][header.index("cls_2_accuracy")] == ""


# -------------------------------------------------------------------- cli
def cli_args(tmp_path, *extra):
    return [*extra, "--n-samples", "96", "--epochs", "1", "--batch-size", "32", "--hidden-dim", "8",
            "--out", str(tmp_path)]


def test_cli_train_twice_identical(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("lam = 0.1\n")
    outputs = []
    for _ in range(2):
        assert main(cli_args(tmp_path / "d", "train", "--config", str(tmp_path / "c.toml"), "--seed", "7")) == 0
        outputs.append([(tmp_path / "d" / n).read_bytes() for n in ("records.csv", "eval.csv", "summary.json")])
    assert outputs[0] == outputs[1]


def test_cli_json_output(tmp_path, capsys):
    assert main(cli_args(tmp_path, "train", "--json")) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["strategy"] == "cggm" and out["records"].endswith("records.csv")
    assert out["wall_time_s"] > 0


def test_cli_usage_errors(tmp_path, capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(cli_args(tmp_path, "train", "--no-such-flag")) == 1
    assert main(cli_args(tmp_path, "train", "--strategy", "ogm")) == 1
    assert main(cli_args(tmp_path, "sweep", "--values", "0.5")) == 1


def test_cli_runtime_error(tmp_path):
    (tmp_path / "bad.cggd").write_bytes(b"CGGD\x01\x00junk")
    assert main(cli_args(tmp_path, "train", "--dataset", str(tmp_path / "bad.cggd"))) == 2


def test_cli_generate_then_train_from_file(tmp_path):
    assert main(cli_args(tmp_path, "generate")) == 0
    path = tmp_path / "dataset.cggd"
    assert path.exists()
    assert main(cli_args(tmp_path / "run", "train", "--dataset", str(path))) == 0


def test_cli_compare_and_probe(tmp_path, capsys):
    assert main(cli_args(tmp_path, "compare", "--json")) == 0
    rows = json.loads(capsys.readouterr().out)
    assert [r["strategy"] for r in rows] == ["joint", "cggm"] and rows[0].keys() == rows[1].keys()
    assert main(cli_args(tmp_path / "p", "probe")) == 0
    assert read_rows(tmp_path / "p" / "probe.csv")[0][0] == "modality"
    ckpt = tmp_path / "p" / "model.cggm"
    assert main(cli_args(tmp_path / "q", "probe", "--checkpoint", str(ckpt))) == 0


def test_saved_dataset_is_used(tmp_path):
    ds = generate(SyntheticSpec(n_samples=64, feature_dims=(4, 4), informativeness=(0.9, 0.1)))
    save(ds, tmp_path / "d.cggd")
    cfg = ExperimentConfig(dataset=str(tmp_path / "d.cggd"), epochs=1, hidden_dim=8, batch_size=16)
    assert harness.train(cfg, tmp_path / "run").summary["iterations"] == 4  # 51 train rows
