import numpy as np
import pytest

from cggmlab import tensor as T
from cggmlab.errors import ConfigError, FormatError, ShapeError, UnsupportedLossError, UnsupportedVersionError
from cggmlab.model import (ModelConfig, MultimodalModel, flat_head_gradient, head_gradient, load_model,
                           loss_residual, save_model, task_loss)
from cggmlab.tensor import Tensor
from oracles import attention_classifier_error, mlp_error, pipeline_error


def small(m=3, task="classification", out=4, **kw):
    dims = kw.pop("dims", (8,) * m)
    return MultimodalModel(ModelConfig(input_dims=dims, output_dim=out if task == "classification" else 1,
                                       task=task, hidden_dim=8, **kw))


def inputs(model, n=4, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n, d)) for d in model.config.input_dims]


def zero_all(params):
    for _, p in params:
        p.data = np.zeros_like(p.data)


# ------------------------------------------------------------------ shapes
def test_encoder_shapes():
    model = MultimodalModel(ModelConfig(input_dims=(8, 8, 8), output_dim=5, hidden_dim=8))
    reps = model.forward_encoders(inputs(model))
    assert [r.shape for r in reps] == [(4, 8)] * 3


def test_prediction_and_classifier_shapes():
    model = small(out=5)
    fwd = model.forward(inputs(model))
    assert fwd.prediction.shape == (4, 5)
    assert [p.shape for p in fwd.classifier_predictions] == [(4, 5)] * 3


def test_zero_encoders_give_zero_reps():
    model = small()
    for enc in model.encoders:
        zero_all(enc.parameters())
    assert all(np.all(r.data == 0) for r in model.forward_encoders(inputs(model)))


def test_zero_head_gives_zero_prediction():
    model = small()
    zero_all(model.head.parameters())
    assert np.all(model.forward(inputs(model)).prediction.data == 0)


def test_zero_classifier_weight_gives_bias_rows():
    model = small()
    cls = model.classifiers[0]
    cls.out.weight.data = np.zeros_like(cls.out.weight.data)
    pred = model.forward(inputs(model)).classifier_predictions[0].data
    assert np.array_equal(pred, np.tile(cls.out.bias.data, (4, 1)))


def test_single_modality_pipeline():
    model = small(m=1)
    assert model.forward(inputs(model)).prediction.shape == (4, 4)


def test_forward_is_deterministic():
    a, b = small(seed=3), small(seed=3)
    x = inputs(a)
    assert a.forward(x).prediction.data.tobytes() == b.forward(x).prediction.data.tobytes()


def test_modality_count_and_dim_checks():
    model = small()
    with pytest.raises(ConfigError):
        model.forward_encoders(inputs(model)[:2])
    bad = inputs(model)
    bad[1] = bad[1][:, :5]
    with pytest.raises(ConfigError):
        model.forward_encoders(bad)


def test_fusion_rejects_misaligned_reps():
    model = small()
    reps = model.forward_encoders(inputs(model))
    reps[2] = Tensor(np.zeros((3, 8)))
    with pytest.raises(ShapeError):
        model.forward_fusion(reps)


def test_attention_encoder_runs():
    model = small(encoder_kind="attention", encoder_tokens=2, classifier_layers=2)
    assert model.forward(inputs(model)).prediction.shape == (4, 4)


@pytest.mark.parametrize("kw", [dict(classifier_layers=3), dict(task="ranking"), dict(direction_grad_scope="all")])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        small(**kw)


# ------------------------------------------------------------- detachment
def test_classifier_loss_does_not_reach_encoders():
    x, y = None, np.array([0, 1, 2, 3])
    grads = []
    for with_cls in (False, True):
        model = small(seed=1)
        x = inputs(model)
        fwd = model.forward(x)
        loss = model.task_loss(fwd.prediction, y)
        if with_cls:
            for p in fwd.classifier_predictions:
                loss = loss + model.task_loss(p, y)
        loss.backward()
        grads.append([p.grad.copy() for _, p in model.param_groups()["encoder-1"]])
    for a, b in zip(*grads):
        assert np.array_equal(a, b)


# ---------------------------------------------------- closed-form gradients
def test_head_gradient_hand_example_ce():
    h = Tensor([[1.0, 0.0]])
    r = loss_residual("cross-entropy", Tensor([[0.0, 0.0]]), np.array([0]))
    g_w, g_b = head_gradient(h, r)
    assert r.data.tolist() == [[-0.5, 0.5]]
    assert g_w.data.tolist() == [[-0.5, 0.5], [0.0, 0.0]]
    assert g_b.data.tolist() == [-0.5, 0.5]


def test_head_gradient_hand_example_l1():
    h = Tensor([[2.0]])
    g_w, g_b = head_gradient(h, loss_residual("l1", Tensor([[3.0]]), np.array([1.0])))
    assert g_w.data.tolist() == [[2.0]] and g_b.data.tolist() == [1.0]


def test_unsupported_loss():
    with pytest.raises(UnsupportedLossError):
        loss_residual("hinge", Tensor([[0.0]]), np.array([0]))
    with pytest.raises(UnsupportedLossError):
        task_loss("hinge", Tensor([[0.0]]), np.array([0]))


def closed_form_vs_autodiff(kind, seed):
    rng = np.random.default_rng(seed)
    b, d, m = int(rng.integers(1, 9)), int(rng.integers(1, 7)), 1 if kind == "l1" else int(rng.integers(2, 6))
    h = Tensor(rng.standard_normal((b, d)))
    w = T.create_parameter((d, m), "given-values", values=rng.standard_normal((d, m)))
    bias = T.create_parameter((m,), "given-values", values=rng.standard_normal(m))
    y = rng.integers(0, m, size=b) if kind == "cross-entropy" else rng.standard_normal(b)
    pred = h @ w + bias
    task_loss(kind, pred, y).backward()
    closed = flat_head_gradient(kind, h, Tensor(pred.data), y).data
    auto = np.concatenate([w.grad.reshape(-1), bias.grad])
    return np.max(np.abs(closed - auto))


@pytest.mark.parametrize("kind", ["cross-entropy", "l1"])
def test_closed_form_head_gradient_matches_autodiff(kind):
    assert max(closed_form_vs_autodiff(kind, s) for s in range(50)) <= 1e-10


# --------------------------------------------------- composite grad checks
@pytest.mark.parametrize("task", ["classification", "regression"])
def test_full_pipeline_finite_differences(task):
    model = MultimodalModel(ModelConfig(input_dims=(4, 4, 4), output_dim=3 if task == "classification" else 1,
                                        task=task, hidden_dim=4, classifier_tokens=2, heads=1, seed=5))
    rng = np.random.default_rng(0)
    x = [rng.standard_normal((5, 4)) for _ in range(3)]
    y = rng.integers(0, 3, 5) if task == "classification" else rng.standard_normal(5)
    assert pipeline_error(model, x, y) <= 1e-4


# ---------------------------------------------------------------- checkpoint
def test_checkpoint_round_trip(tmp_path):
    model = small(seed=11, encoder_kind="attention", encoder_tokens=2)
    path = tmp_path / "m.cggm"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.config == model.config
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    save_model(loaded, tmp_path / "again.cggm")
    assert path.read_bytes() == (tmp_path / "again.cggm").read_bytes()


def test_checkpoint_truncated_and_version(tmp_path):
    model = small()
    path = tmp_path / "m.cggm"
    save_model(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError) as info:
        load_model(path)
    assert info.value.offset > 0
    path.write_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    with pytest.raises(UnsupportedVersionError):
        load_model(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_model(path)
