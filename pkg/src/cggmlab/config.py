"""Flat experiment configuration and its key-value file format.

A config file is flat TOML: one ``key = value`` per line, no tables. Every
key is a field of :class:`ExperimentConfig`; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cggm import CggmConfig
from .data import SyntheticSpec
from .errors import ConfigError
from .model import ModelConfig
from .optim import OptimizerConfig

STRATEGIES = ("joint", "unimodal", "mslr", "mrd", "cggm")


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    dataset: str = ""
    task: str = "classification"
    classes: int = 4
    informativeness: tuple = (0.9, 0.3, 0.3)
    feature_dims: tuple = (8, 8, 8)
    n_samples: int = 2000
    train_fraction: float = 0.8
    noise: float = 1.0
    # model
    hidden_dim: int = 16
    encoder_kind: str = "mlp"
    encoder_depth: int = 2
    encoder_tokens: int = 4
    fusion_depth: int = 1
    classifier_layers: int = 1
    classifier_tokens: int = 4
    heads: int = 2
    # optimizer
    optimizer: str = "adam"
    lr: float = 1e-3
    classifier_lr: float = 5e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip: float = 0.8  # 0 disables clipping
    schedule: str = "none"
    step_size: int = 10
    gamma: float = 0.1
    warmup_epochs: int = 0
    min_lr: float = 0.0
    # modulation
    rho: float = 1.3
    lam: float = 0.20
    denom_tolerance: float = 1e-8
    magnitude: bool = True
    direction: bool = True
    lgm_timing: str = "current"
    metric_ema: float = 0.0
    # strategy
    strategy: str = "cggm"
    modality: int = 1
    mslr_lrs: tuple = ()
    mrd_p: float = 0.5
    # run
    epochs: int = 20
    batch_size: int = 64
    eval_interval: int = 1
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        for name in ("informativeness", "feature_dims", "mslr_lrs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    # ------------------------------------------------------------ validation
    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_interval < 0:
            raise ConfigError("epochs and batch_size must be >= 1, eval_interval >= 0")
        if not 0.0 <= self.mrd_p <= 1.0:
            raise ConfigError("mrd_p must lie in [0, 1]")
        if not 0.0 <= self.metric_ema < 1.0:
            raise ConfigError("metric_ema must lie in [0, 1)")
        if self.clip < 0:
            raise ConfigError("clip must be >= 0")
        if not self.dataset:
            self.data_spec()
            m = len(self.feature_dims)
            if self.strategy == "unimodal" and not 1 <= self.modality <= m:
                raise ConfigError(f"modality must lie in 1..{m}")
            if self.strategy == "mslr" and len(self.mslr_lrs) != m:
                raise ConfigError(f"mslr_lrs needs one learning rate per modality ({m})")
        self.optimizer_config()
        self.cggm_config()

    # ------------------------------------------------------------ sub-configs
    def data_spec(self) -> SyntheticSpec:
        return SyntheticSpec(task=self.task, classes=self.classes, informativeness=self.informativeness,
                             feature_dims=self.feature_dims, n_samples=self.n_samples,
                             train_fraction=self.train_fraction, noise=self.noise, seed=self.seed)

    def model_config(self, input_dims, output_dim, task) -> ModelConfig:
        return ModelConfig(input_dims=tuple(input_dims), output_dim=output_dim, task=task,
                           hidden_dim=self.hidden_dim, encoder_kind=self.encoder_kind,
                           encoder_depth=self.encoder_depth, encoder_tokens=self.encoder_tokens,
                           fusion_depth=self.fusion_depth, classifier_layers=self.classifier_layers,
                           classifier_tokens=self.classifier_tokens, heads=self.heads, seed=self.seed)

    def optimizer_config(self) -> OptimizerConfig:
        group_lrs = {"classifier": self.classifier_lr}
        if self.strategy == "mslr":
            group_lrs.update({f"encoder-{i}": lr for i, lr in enumerate(self.mslr_lrs, 1)})
        return OptimizerConfig(kind=self.optimizer, lr=self.lr, group_lrs=group_lrs, momentum=self.momentum,
                               betas=(self.beta1, self.beta2), eps=self.adam_eps, weight_decay=self.weight_decay,
                               clip=self.clip or None, schedule=self.schedule, step_size=self.step_size,
                               gamma=self.gamma, warmup=self.warmup_epochs, total=self.epochs, min_lr=self.min_lr)

    def cggm_config(self) -> CggmConfig:
        modulated = self.strategy == "cggm"
        return CggmConfig(rho=self.rho, lam=self.lam, denom_tolerance=self.denom_tolerance,
                          magnitude_enabled=modulated and self.magnitude,
                          direction_enabled=modulated and self.direction, lgm_timing=self.lgm_timing)

    # ---------------------------------------------------------------- output
    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def run_id(self) -> str:
        """Hash of the canonical config; the output directory is not part of it."""
        d = self.to_dict()
        del d["out"]
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(canon.encode("utf-8")).hexdigest()

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def label(self) -> str:
        return f"unimodal:{self.modality}" if self.strategy == "unimodal" else self.strategy


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
DEFAULTS = ExperimentConfig()


def coerce(key: str, value):
    """Convert a file or command-line value to the field's type."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(DEFAULTS, key)
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("true", "1", "yes", "on"):
                return True
            if text in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            items = value if isinstance(value, (list, tuple)) else [v for v in str(value).split(",") if v.strip()]
            conv = int if key == "feature_dims" else float
            return tuple(conv(v) for v in items)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for {key}") from None


def read_config_file(path) -> dict:
    try:
        raw = tomllib.loads(Path(path).read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    out = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: tables are not allowed (key {key!r})")
        out[key] = coerce(key, value)
    return out


def write_config_file(config: ExperimentConfig, path):
    lines = []
    for key, value in config.to_dict().items():
        lines.append(f"{key} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def build_config(path=None, **overrides) -> ExperimentConfig:
    """Defaults, then the config file, then explicit overrides."""
    values = read_config_file(path) if path else {}
    for key, value in overrides.items():
        if value is not None:
            values[key] = coerce(key, value)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
