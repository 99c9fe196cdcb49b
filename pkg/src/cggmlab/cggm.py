"""Classifier-guided gradient modulation.

Magnitude: each encoder's gradient is multiplied by a balancing term that is
small for modalities whose classifier improved most this iteration and large
for the ones lagging behind.

Direction: a loss term rewards cosine alignment between the fusion head's
final-layer gradient and each classifier's final-layer gradient, weighted by
the same balancing terms. The head gradients are built in closed form as
graph nodes, so one backward pass covers the task loss, the classifier losses
and the direction loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .metrics import MetricState, evaluate_batch, metric_for_task
from .model import MultimodalModel, flat_head_gradient
from .tensor import Tensor

LGM_TIMINGS = ("current", "delayed")


@dataclass(frozen=True)
class CggmConfig:
    rho: float = 1.3
    lam: float = 0.20
    denom_tolerance: float = 1e-8
    scale_min: float = 0.0
    scale_max: float | None = None  # None means rho
    magnitude_enabled: bool = True
    direction_enabled: bool = True
    lgm_timing: str = "current"

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigError("rho must be positive")
        if not self.lam >= 0:
            raise ConfigError("lambda must be non-negative")
        if not self.denom_tolerance > 0:
            raise ConfigError("denom_tolerance must be positive")
        if self.clamp[0] > self.clamp[1]:
            raise ConfigError("scale clamp bounds are out of order")
        if self.lgm_timing not in LGM_TIMINGS:
            raise ConfigError(f"lgm_timing must be one of {LGM_TIMINGS}")

    @property
    def clamp(self) -> tuple[float, float]:
        return self.scale_min, self.rho if self.scale_max is None else self.scale_max


@dataclass(frozen=True)
class BalancingTerms:
    raw: np.ndarray
    clamped: np.ndarray
    fallback: bool = False
    t: int = 0


def balancing_terms(delta, config: CggmConfig, t: int = 0) -> BalancingTerms:
    """rho * (sum of the other modalities' improvements) / (sum of all improvements).

    When the denominator is within ``denom_tolerance`` of zero every modality
    gets the neutral value rho*(M-1)/M, which keeps sum(raw) = rho*(M-1).
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    m = delta.size
    if m < 1:
        raise ShapeError("need at least one modality")
    if not np.all(np.isfinite(delta)):
        raise NumericError(f"non-finite improvement vector {delta}")
    rho = config.rho
    total = math.fsum(delta)
    neutral = rho * (m - 1) / m
    fallback = abs(total) <= config.denom_tolerance
    if fallback or np.all(delta == delta[0]):
        # Equal improvements give exactly (M-1)/M; evaluate it in closed form.
        raw = np.full(m, neutral)
    else:
        others = [math.fsum(np.delete(delta, i)) for i in range(m)]
        raw = np.array([rho * (o / total) for o in others])
    lo, hi = config.clamp
    return BalancingTerms(raw, np.minimum(np.maximum(raw, lo), hi), fallback, t)


def scale_encoder_gradients(model: MultimodalModel, terms: BalancingTerms):
    """Multiply every gradient of encoder group i by clamped term i, in place."""
    factors = np.asarray(terms.clamped).reshape(-1)
    if factors.size != len(model.encoders):
        raise ShapeError(f"{factors.size} scale factors for {len(model.encoders)} encoders")
    groups = model.param_groups()
    for i, factor in enumerate(factors, 1):
        for name, p in groups[f"encoder-{i}"]:
            if p.grad is None:
                raise ContractError(f"encoder-{i}/{name} has no gradient; run backward first")
            p.grad = p.grad * factor


def direction_loss(fusion_grad: Tensor, classifier_grads, raw_b) -> tuple[Tensor, np.ndarray]:
    """(1/M) sum_i |B_i| - B_i * cos(g_F, g_i), with B constant and g_i detached.

    Returns the loss and the cosine values.
    """
    raw_b = np.asarray(raw_b, dtype=np.float64).reshape(-1)
    if raw_b.size != len(classifier_grads):
        raise ShapeError(f"{raw_b.size} balancing terms for {len(classifier_grads)} classifier gradients")
    terms, sims = [], []
    for b, g in zip(raw_b, classifier_grads):
        if g.size != fusion_grad.size:
            raise ShapeError(f"gradient lengths differ: {fusion_grad.size} vs {g.size}")
        sim = T.cosine_similarity(fusion_grad, T.detach(g))
        sims.append(sim.item())
        terms.append(abs(b) - T.scale(sim, b))
    loss = terms[0]
    for term in terms[1:]:
        loss = loss + term
    return T.scale(loss, 1.0 / raw_b.size), np.array(sims)


def total_loss(task: Tensor, lgm: Tensor, lam: float) -> Tensor:
    if lam == 0:
        return task
    return task + T.scale(lgm, lam)


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    task_loss: float
    lgm: float
    eps: tuple
    braw: tuple
    bclamp: tuple
    gnorm: tuple
    cos: tuple


def encoder_grad_norms(model: MultimodalModel) -> list[float]:
    out = []
    for i in range(1, len(model.encoders) + 1):
        total = 0.0
        for _, p in model.param_groups()[f"encoder-{i}"]:
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        out.append(math.sqrt(total))
    return out


def training_step(model: MultimodalModel, batch, metric_state: MetricState, optimizer, config: CggmConfig,
                  *, drop=None, delta_override=None, previous_raw_b=None) -> TrainRecord:
    """One iteration of modulated training.

    ``batch`` is ``(inputs, targets)`` with one input matrix per modality.
    ``drop`` zeroes representations for the fusion module (modality dropout).
    ``delta_override`` replaces the measured improvement vector.
    ``previous_raw_b`` is the previous iteration's raw balancing vector, used
    by the delayed direction-loss timing.
    """
    xs, targets = batch
    kind = model.config.loss_kind
    optimizer.zero_grad()

    fwd = model.forward(xs, drop=drop)
    raw_metrics = [evaluate_batch(metric_state.kind, p.data, targets) for p in fwd.classifier_predictions]
    delta = metric_state.update_and_delta(raw_metrics)
    if delta_override is not None:
        delta = np.asarray(delta_override, dtype=np.float64)
    terms = balancing_terms(delta, config, metric_state.t)

    task = model.task_loss(fwd.prediction, targets)
    g_fusion = flat_head_gradient(kind, fwd.fused, fwd.prediction, targets)
    g_cls = [T.detach(flat_head_gradient(kind, z, p, targets))
             for z, p in zip(fwd.classifier_features, fwd.classifier_predictions)]
    if config.lgm_timing == "current":
        lgm_b = terms.raw
    else:
        lgm_b = np.zeros_like(terms.raw) if previous_raw_b is None else np.asarray(previous_raw_b)
    lgm, sims = direction_loss(g_fusion, g_cls, lgm_b)

    loss = total_loss(task, lgm, config.lam if config.direction_enabled else 0.0)
    for p in fwd.classifier_predictions:
        loss = loss + model.task_loss(p, targets)
    loss.backward()

    if config.magnitude_enabled:
        scale_encoder_gradients(model, terms)
    gnorm = encoder_grad_norms(model)
    optimizer.step()

    return TrainRecord(
        iteration=metric_state.t,
        task_loss=task.item(),
        lgm=lgm.item(),
        eps=tuple(raw_metrics),
        braw=tuple(float(b) for b in terms.raw),
        bclamp=tuple(float(b) for b in terms.clamped),
        gnorm=tuple(gnorm),
        cos=tuple(float(s) for s in sims),
    )


def new_metric_state(model: MultimodalModel, beta: float = 0.0) -> MetricState:
    return MetricState(metric_for_task(model.config.task), model.config.modality_count, beta)
