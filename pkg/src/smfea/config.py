"""Flat training configuration with JSON round-trip and override semantics."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import ConfigurationError
from .objective import FusionWeights, NEGATIVE_MODES
from .treeenc import CELL_VARIANTS

SEED_ENV_VAR = "SMFEA_SEED"
PRECISIONS = {"single": torch.float32, "double": torch.float64}

# fields that determine parameter shapes or cell semantics; checkpoints from a
# differing architecture are refused
ARCH_FIELDS = (
    "d_region",
    "d_embed",
    "d_node",
    "word_dim",
    "cell_variant",
    "precision",
)


@dataclass(frozen=True)
class TrainConfig:
    # model dims
    d_region: int = 64
    d_embed: int = 128
    d_node: int = 128
    word_dim: int = 32
    temperature: float = 1.0
    cell_variant: str = "double_forget"
    # fusion and losses
    beta_d: float = 0.6
    beta_t: float = 0.4
    beta_c: float = 0.0
    margin: float = 0.2
    negatives: str = "sum"
    rank_weight: float = 1.0
    ce_weight: float = 1.0
    kl_weight: float = 1.0
    # optimization
    lr: float = 2e-4
    lr_decay: float = 0.1
    decay_every: int = 25
    max_epochs: int = 50
    batch_size: int = 16
    grad_clip: float = 0.0
    # data and reproducibility
    val_fraction: float = 0.1
    min_count: int = 1
    seed: int = 0
    precision: str = "single"
    deterministic: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if not (0 < self.lr_decay <= 1):
            raise ConfigurationError("lr_decay must be in (0, 1]")
        if self.decay_every < 1:
            raise ConfigurationError("decay_every must be >= 1")
        if self.max_epochs < 0:
            raise ConfigurationError("max_epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (in-batch negatives)")
        if not (0 <= self.val_fraction < 1):
            raise ConfigurationError("val_fraction must be in [0, 1)")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.cell_variant not in CELL_VARIANTS:
            raise ConfigurationError(f"cell_variant must be one of {CELL_VARIANTS}")
        if self.negatives not in NEGATIVE_MODES:
            raise ConfigurationError(f"negatives must be one of {NEGATIVE_MODES}")
        FusionWeights(self.beta_d, self.beta_t, self.beta_c)  # validates

    @property
    def fusion_weights(self) -> FusionWeights:
        return FusionWeights(self.beta_d, self.beta_t, self.beta_c)

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    def learning_rate(self, epoch: int) -> float:
        """Closed-form schedule: lr * decay^floor((epoch - 1) / decay_every)."""
        return self.lr * self.lr_decay ** ((epoch - 1) // self.decay_every)

    def replace(self, **overrides) -> "TrainConfig":
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        values = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(values, dict):
            raise ConfigurationError(f"{path}: config must be a flat JSON object")
        values.update(overrides)
        return cls.from_dict(values)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    def arch_fingerprint(self) -> str:
        arch = {name: getattr(self, name) for name in ARCH_FIELDS}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()


def resolve_seed(config: TrainConfig) -> TrainConfig:
    """Apply the SMFEA_SEED environment override, if set."""
    env = os.environ.get(SEED_ENV_VAR)
    if env is None:
        return config
    try:
        return config.replace(seed=int(env))
    except ValueError as exc:
        raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer, got {env!r}") from exc
