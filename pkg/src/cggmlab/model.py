"""Multimodal model: per-modality encoders, fusion module, prediction head and
auxiliary per-modality classifiers.

Representations are ``batch x hidden`` matrices. The fusion module consumes
their concatenation; the head is a single affine map on the fused feature.
Each classifier reads a *detached* copy of its modality's representation, so
classifier losses never reach the encoders.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .binio import Reader, Writer
from .errors import ConfigError, FormatError, ShapeError, UnsupportedLossError
from .tensor import Tensor

TASKS = ("classification", "regression")
ENCODER_KINDS = ("mlp", "attention")
CHECKPOINT_MAGIC = b"CGGM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``input_dims`` has one entry per modality. With the attention encoder a
    modality's input vector is read as ``encoder_tokens`` tokens of equal
    width. Classifiers view the hidden vector as ``classifier_tokens`` tokens
    for their self-attention layers.
    """

    input_dims: tuple[int, ...]
    output_dim: int
    task: str = "classification"
    hidden_dim: int = 16
    encoder_kind: str = "mlp"
    encoder_depth: int = 2
    encoder_tokens: int = 4
    fusion_depth: int = 1
    classifier_layers: int = 1
    classifier_tokens: int = 4
    heads: int = 2
    direction_grad_scope: str = "final-layer"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        self.validate()

    @property
    def modality_count(self) -> int:
        return len(self.input_dims)

    def validate(self):
        if self.modality_count < 1:
            raise ConfigError("at least one modality is required")
        for name in ("output_dim", "hidden_dim", "encoder_depth", "fusion_depth", "encoder_tokens",
                     "classifier_tokens", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if any(d < 1 for d in self.input_dims):
            raise ConfigError("input dimensions must be >= 1")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.task == "regression" and self.output_dim != 1:
            raise ConfigError("regression needs output_dim = 1")
        if self.task == "classification" and self.output_dim < 2:
            raise ConfigError("classification needs output_dim >= 2")
        if self.classifier_layers not in (1, 2):
            raise ConfigError("classifier_layers must be 1 or 2")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.direction_grad_scope != "final-layer":
            raise ConfigError("only direction_grad_scope='final-layer' is supported")
        if self.hidden_dim % self.classifier_tokens:
            raise ConfigError("hidden_dim must be divisible by classifier_tokens")
        if (self.hidden_dim // self.classifier_tokens) % self.heads:
            raise ConfigError("classifier token width must be divisible by heads")
        if self.encoder_kind == "attention":
            if any(d % self.encoder_tokens for d in self.input_dims):
                raise ConfigError("input dims must be divisible by encoder_tokens")
            if self.hidden_dim % self.heads:
                raise ConfigError("hidden_dim must be divisible by heads")

    @property
    def loss_kind(self) -> str:
        return "cross-entropy" if self.task == "classification" else "l1"


# ------------------------------------------------------------------ layers
def _seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


class Linear:
    """y = x W + b with W stored as in_features x out_features."""

    def __init__(self, n_in, n_out, seed):
        ss = _seq(seed)
        sw, sb = ss.spawn(2)
        self.weight = T.create_parameter((n_in, n_out), seed=sw)
        self.bias = T.create_parameter((n_out,), seed=sb, fan_in=n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class SelfAttention:
    """Pre-norm multi-head self-attention with a residual connection.

    Input and output are ``batch x tokens x width``.
    """

    def __init__(self, width, heads, seed):
        ss = _seq(seed)
        seeds = ss.spawn(4)
        self.width, self.heads = width, heads
        self.q = T.create_parameter((width, width), seed=seeds[0])
        self.k = T.create_parameter((width, width), seed=seeds[1])
        self.v = T.create_parameter((width, width), seed=seeds[2])
        self.o = T.create_parameter((width, width), seed=seeds[3])

    def _split(self, x, b, n):
        hd = self.width // self.heads
        return T.transpose(x.reshape(b, n, self.heads, hd), (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        b, n, w = x.shape
        hd = w // self.heads
        z = T.layernorm(x)
        q = self._split(z @ self.q, b, n)
        k = self._split(z @ self.k, b, n)
        v = self._split(z @ self.v, b, n)
        att = T.softmax(T.scale(q @ T.transpose(k), 1.0 / math.sqrt(hd)))
        out = T.transpose(att @ v, (0, 2, 1, 3)).reshape(b, n, w)
        return x + out @ self.o

    def parameters(self):
        return [("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o)]


class MLPEncoder:
    def __init__(self, n_in, hidden, depth, seed):
        seeds = _seq(seed).spawn(depth)
        dims = [n_in] + [hidden] * depth
        self.layers = [Linear(dims[i], dims[i + 1], seeds[i]) for i in range(depth)]

    def __call__(self, x):
        for layer in self.layers:
            x = T.gelu(layer(x))
        return x

    def parameters(self):
        return [(f"{i}.{n}", p) for i, layer in enumerate(self.layers) for n, p in layer.parameters()]


class AttentionEncoder:
    """Token embedding, one self-attention block, mean pooling over tokens."""

    def __init__(self, n_in, hidden, tokens, heads, seed):
        s_embed, s_att = _seq(seed).spawn(2)
        self.tokens = tokens
        self.embed = Linear(n_in // tokens, hidden, s_embed)
        self.attention = SelfAttention(hidden, heads, s_att)

    def __call__(self, x):
        b, n = x.shape
        z = T.gelu(self.embed(x.reshape(b, self.tokens, n // self.tokens)))
        return T.mean(self.attention(z), axis=1)

    def parameters(self):
        return ([(f"embed.{n}", p) for n, p in self.embed.parameters()]
                + [(f"attention.{n}", p) for n, p in self.attention.parameters()])


class Fusion:
    def __init__(self, n_in, hidden, depth, seed):
        self.mlp = MLPEncoder(n_in, hidden, depth, seed)

    def __call__(self, reps: Sequence[Tensor]) -> Tensor:
        return self.mlp(T.concat(reps, axis=-1))

    def parameters(self):
        return self.mlp.parameters()


class Classifier:
    """Self-attention over the hidden vector viewed as tokens, then an affine map.

    ``features`` returns the input of the final affine layer, which the
    direction loss needs alongside the prediction.
    """

    def __init__(self, hidden, tokens, layers, heads, n_out, seed):
        seeds = _seq(seed).spawn(layers + 1)
        self.tokens = tokens
        self.blocks = [SelfAttention(hidden // tokens, heads, seeds[i]) for i in range(layers)]
        self.out = Linear(hidden, n_out, seeds[-1])

    def features(self, h: Tensor) -> Tensor:
        b, d = h.shape
        z = h.reshape(b, self.tokens, d // self.tokens)
        for block in self.blocks:
            z = block(z)
        return z.reshape(b, d)

    def __call__(self, h):
        return self.out(self.features(h))

    def parameters(self):
        params = [(f"attn{i}.{n}", p) for i, blk in enumerate(self.blocks) for n, p in blk.parameters()]
        return params + [(f"out.{n}", p) for n, p in self.out.parameters()]


# ------------------------------------------------------------------- model
@dataclass
class Forward:
    """Everything one forward pass produces."""

    reps: list[Tensor]
    fused: Tensor
    prediction: Tensor
    classifier_features: list[Tensor] = field(default_factory=list)
    classifier_predictions: list[Tensor] = field(default_factory=list)


class MultimodalModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        root = np.random.SeedSequence(c.seed)
        s_enc, s_fus, s_head, s_cls = root.spawn(4)
        enc_seeds = s_enc.spawn(c.modality_count)
        cls_seeds = s_cls.spawn(c.modality_count)
        if c.encoder_kind == "mlp":
            self.encoders = [MLPEncoder(d, c.hidden_dim, c.encoder_depth, s)
                             for d, s in zip(c.input_dims, enc_seeds)]
        else:
            self.encoders = [AttentionEncoder(d, c.hidden_dim, c.encoder_tokens, c.heads, s)
                             for d, s in zip(c.input_dims, enc_seeds)]
        self.fusion = Fusion(c.modality_count * c.hidden_dim, c.hidden_dim, c.fusion_depth, s_fus)
        self.head = Linear(c.hidden_dim, c.output_dim, s_head)
        self.classifiers = [Classifier(c.hidden_dim, c.classifier_tokens, c.classifier_layers, c.heads,
                                       c.output_dim, s) for s in cls_seeds]

    # -- parameter bookkeeping
    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Parameters by group, in declaration order."""
        groups = {}
        for i, enc in enumerate(self.encoders, 1):
            groups[f"encoder-{i}"] = enc.parameters()
        groups["fusion"] = self.fusion.parameters()
        groups["head"] = self.head.parameters()
        for i, cls in enumerate(self.classifiers, 1):
            groups[f"classifier-{i}"] = cls.parameters()
        return groups

    def parameters(self) -> list[Tensor]:
        return [p for group in self.param_groups().values() for _, p in group]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    # -- forward pieces
    def _check_batch(self, xs):
        if len(xs) != self.config.modality_count:
            raise ConfigError(f"expected {self.config.modality_count} modalities, got {len(xs)}")
        n = None
        for i, (x, d) in enumerate(zip(xs, self.config.input_dims)):
            if x.ndim != 2 or x.shape[1] != d:
                raise ConfigError(f"modality {i + 1}: expected batch x {d} input, got {x.shape}")
            if n is not None and x.shape[0] != n:
                raise ConfigError("modalities have different batch sizes")
            n = x.shape[0]

    def forward_encoders(self, xs) -> list[Tensor]:
        xs = [T.as_tensor(x) for x in xs]
        self._check_batch(xs)
        return [enc(x) for enc, x in zip(self.encoders, xs)]

    def forward_fusion(self, reps: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
        if len(reps) != self.config.modality_count:
            raise ShapeError(f"expected {self.config.modality_count} representations, got {len(reps)}")
        if len({r.shape for r in reps}) != 1:
            raise ShapeError(f"representations are not batch-aligned: {[r.shape for r in reps]}")
        fused = self.fusion(reps)
        return fused, self.head(fused)

    def forward_classifiers(self, reps: Sequence[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
        feats, preds = [], []
        for cls, h in zip(self.classifiers, reps):
            z = cls.features(T.detach(h))
            feats.append(z)
            preds.append(cls.out(z))
        return feats, preds

    def forward(self, xs, drop=None, classifiers: bool = True) -> Forward:
        """Full pass. ``drop[i]`` true replaces representation i by zeros for the fusion module only."""
        reps = self.forward_encoders(xs)
        fusion_in = reps
        if drop is not None and any(drop):
            fusion_in = [Tensor(np.zeros(r.shape)) if d else r for r, d in zip(reps, drop)]
        fused, pred = self.forward_fusion(fusion_in)
        out = Forward(reps, fused, pred)
        if classifiers:
            out.classifier_features, out.classifier_predictions = self.forward_classifiers(reps)
        return out

    def task_loss(self, prediction: Tensor, targets) -> Tensor:
        return task_loss(self.config.loss_kind, prediction, targets)


def task_loss(kind: str, prediction: Tensor, targets) -> Tensor:
    if kind == "cross-entropy":
        return T.cross_entropy(prediction, targets)
    if kind == "l1":
        return T.l1_loss(prediction, targets)
    raise UnsupportedLossError(f"unsupported loss kind {kind!r}")


# ------------------------------------------------------ closed-form gradients
def loss_residual(kind: str, prediction: Tensor, targets) -> Tensor:
    """dL/d(prediction) as a graph expression of the prediction."""
    b = prediction.shape[0]
    if kind == "cross-entropy":
        oh = Tensor(T.one_hot(targets, prediction.shape[-1]))
        return T.scale(T.softmax(prediction) - oh, 1.0 / b)
    if kind == "l1":
        t = Tensor(np.asarray(targets, dtype=np.float64).reshape(prediction.shape))
        return T.scale(T.sign(prediction - t), 1.0 / b)
    raise UnsupportedLossError(f"unsupported loss kind {kind!r}")


def head_gradient(h: Tensor, residual: Tensor) -> tuple[Tensor, Tensor]:
    """Weight gradient h^T R (d x m) and bias gradient (column sums of R)."""
    if h.shape[0] != residual.shape[0]:
        raise ShapeError(f"batch sizes differ: {h.shape} vs {residual.shape}")
    return T.transpose(h) @ residual, T.sum_(residual, axis=0)


def flat_head_gradient(kind: str, h: Tensor, prediction: Tensor, targets) -> Tensor:
    """Final affine layer gradient flattened row-major, bias appended: length d*m + m."""
    g_w, g_b = head_gradient(h, loss_residual(kind, prediction, targets))
    return T.concat([T.flatten(g_w), g_b])


# -------------------------------------------------------------- checkpoint
def save_model(model: MultimodalModel, path):
    w = Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.u16(CHECKPOINT_VERSION)
    w.record(dataclasses.asdict(model.config))
    groups = model.param_groups()
    w.u32(len(groups))
    for gname, params in groups.items():
        w.text(gname)
        w.u32(len(params))
        for pname, p in params:
            w.text(pname)
            w.u8(p.ndim)
            w.f64_array(p.data)
    Path(path).write_bytes(w.getvalue())


def load_model(path) -> MultimodalModel:
    r = Reader(Path(path).read_bytes())
    r.magic(CHECKPOINT_MAGIC)
    r.version(CHECKPOINT_VERSION)
    start = r.pos
    try:
        config = ModelConfig(**r.record("config record"))
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"invalid config record: {exc}", start) from None
    model = MultimodalModel(config)
    expected = model.param_groups()
    at = r.pos
    if r.u32("group count") != len(expected):
        raise FormatError("parameter group count does not match config", at)
    for gname, params in expected.items():
        at = r.pos
        if r.text("group name") != gname:
            raise FormatError(f"expected group {gname!r}", at)
        at = r.pos
        if r.u32("parameter count") != len(params):
            raise FormatError(f"parameter count mismatch in group {gname!r}", at)
        for pname, p in params:
            at = r.pos
            if r.text("parameter name") != pname:
                raise FormatError(f"expected parameter {gname}/{pname}", at)
            ndim = r.u8("rank")
            at = r.pos
            arr = r.f64_array(ndim, f"{gname}/{pname}")
            if arr.shape != p.shape:
                raise FormatError(f"shape {arr.shape} does not match {p.shape} for {gname}/{pname}", at)
            p.data = arr.copy()
    r.expect_end()
    return model
