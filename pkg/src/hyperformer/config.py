"""Model configuration, parameter records and owner tags."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import FrozenSet, Optional

from .autodiff import EPS, Tensor

FULL_FINETUNE = "full-finetune"
ADAPTERS = "adapters"
ADAPTERS_SHARED_LN = "adapters-shared-ln"
HYPERFORMER = "hyperformer"
HYPERFORMER_PP = "hyperformer++"
VARIANTS = (FULL_FINETUNE, ADAPTERS, ADAPTERS_SHARED_LN, HYPERFORMER, HYPERFORMER_PP)

NO_ADAPTERS = "no-adapters"
NO_CONDITIONAL_LN = "no-conditional-ln"
NO_TASK_PROJECTOR = "no-task-projector"
FREEZE_BASE_LN = "freeze-base-ln"
USE_TASK_PREFIXES = "use-task-prefixes"
ABLATIONS = (NO_ADAPTERS, NO_CONDITIONAL_LN, NO_TASK_PROJECTOR, FREEZE_BASE_LN, USE_TASK_PREFIXES)

# owner tags
BASE = "base"
BASE_LN = "base-layer-norm"
HYPER = "hyper"
TASK_FEATURE = "task-feature"
ADAPTER = "adapter"
OWNERS = (BASE, BASE_LN, HYPER, TASK_FEATURE, ADAPTER)

STACKS = ("enc", "dec")
POSITIONS = (0, 1)  # after attention, after feed-forward


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 8
    heads: int = 2
    d_ff: int = 16
    vocab: int = 32
    max_len: int = 32
    adapter_dim: Optional[int] = None
    reduction: Optional[int] = None
    variant: str = HYPERFORMER_PP
    task_dim: int = 64          # t: task embedding I
    feature_dim: int = 512      # t': task feature z (per-layer hypernetwork variant)
    projector_hidden: int = 128  # e
    ablations: FrozenSet[str] = field(default_factory=frozenset)
    eps: float = EPS
    base_init_std: float = 0.02
    embed_init_std: float = 1.0
    head_init_std: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "ablations", frozenset(self.ablations))
        for name in ("layers", "hidden", "heads", "d_ff", "vocab", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        unknown = self.ablations - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
        if self.adapter_dim is None and self.reduction is None:
            object.__setattr__(self, "adapter_dim", max(1, self.hidden // 8))
        elif self.adapter_dim is None:
            if self.reduction < 1 or self.hidden % self.reduction:
                raise ConfigError(f"reduction {self.reduction} does not divide hidden {self.hidden}")
            object.__setattr__(self, "adapter_dim", self.hidden // self.reduction)
        elif self.reduction is not None and self.reduction * self.adapter_dim != self.hidden:
            raise ConfigError("reduction * adapter_dim must equal hidden")
        if self.adapter_dim < 1:
            raise ConfigError("adapter_dim must be >= 1")
        for name in ("task_dim", "feature_dim", "projector_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        self._check_ablations()

    def _check_ablations(self):
        hyper = self.variant in (HYPERFORMER, HYPERFORMER_PP)
        ab = self.ablations
        if NO_ADAPTERS in ab and not hyper:
            raise ConfigError(f"{NO_ADAPTERS} contradicts variant {self.variant}")
        if NO_CONDITIONAL_LN in ab and not hyper:
            raise ConfigError(f"{NO_CONDITIONAL_LN} only applies to hypernetwork variants")
        if NO_CONDITIONAL_LN in ab and NO_ADAPTERS in ab:
            raise ConfigError(f"{NO_CONDITIONAL_LN} is meaningless with {NO_ADAPTERS}")
        if NO_TASK_PROJECTOR in ab:
            if self.variant != HYPERFORMER:
                raise ConfigError(f"{NO_TASK_PROJECTOR} only applies to {HYPERFORMER}")
            if NO_ADAPTERS in ab:
                raise ConfigError(f"{NO_TASK_PROJECTOR} is meaningless with {NO_ADAPTERS}")
            if self.feature_dim != self.task_dim:
                raise ConfigError(f"{NO_TASK_PROJECTOR} requires feature_dim == task_dim")
        if FREEZE_BASE_LN in ab and self.variant == FULL_FINETUNE:
            raise ConfigError(f"{FREEZE_BASE_LN} contradicts {FULL_FINETUNE}")
        if USE_TASK_PREFIXES in ab and hyper:
            raise ConfigError(f"{USE_TASK_PREFIXES} replaces task-embedding conditioning; "
                              f"not valid with {self.variant}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def has_adapters(self) -> bool:
        return self.variant != FULL_FINETUNE and NO_ADAPTERS not in self.ablations

    @property
    def is_hyper(self) -> bool:
        return self.variant in (HYPERFORMER, HYPERFORMER_PP)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablations"] = sorted(self.ablations)
        return d


@dataclass
class Parameter:
    name: str
    tensor: Tensor
    owner: str
    trainable: bool = True
    task: Optional[str] = None  # set for parameters owned by a single task

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)

    @property
    def shape(self):
        return self.tensor.shape
