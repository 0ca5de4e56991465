"""Task-conditioned adapters and the hypernetworks that generate them.

Two hypernetwork layouts are supported:

* per-layer (``hyperformer``): a two-layer ReLU projector maps the task feature
  ``z`` to a task embedding ``I``; every (layer, position) owns linear heads
  producing the adapter's up/down projections and its layer-norm scale/shift.
* shared (``hyperformer++``): the projector sees ``concat(z, l_i, p_j)`` and is
  followed by a layer norm, and a single head set per stack serves every
  layer and position.

All heads are bias-free, so generated weights are linear in ``I``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Dict, Hashable, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import (
    HYPER,
    HYPERFORMER,
    HYPERFORMER_PP,
    NO_CONDITIONAL_LN,
    NO_TASK_PROJECTOR,
    POSITIONS,
    STACKS,
    TASK_FEATURE,
    ModelConfig,
    Parameter,
)

Getter = Callable[[str], Tensor]


@dataclass
class GeneratedWeights:
    up: Tensor      # U, [h, d]
    down: Tensor    # D, [d, h]
    gamma: Tensor   # [h]
    beta: Tensor    # [h]


def adapter_forward(x: Tensor, w: GeneratedWeights, eps: float = ad.EPS) -> Tensor:
    """LN_{gamma,beta}(GeLU(x D^T) U^T) + x."""
    hidden = ad.gelu(ad.linear(x, ad.transpose(w.down, (1, 0))))
    up = ad.linear(hidden, ad.transpose(w.up, (1, 0)))
    return ad.add(ad.layer_norm(up, w.gamma, w.beta, eps), x)


# ---------------------------------------------------------------------------
# parameter construction


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def hyper_parameters(cfg: ModelConfig, task_names: List[str], rng: np.random.Generator) -> List[Parameter]:
    """Task features, projectors and heads for the hypernetwork variants."""
    t, e, h, d, L = cfg.task_dim, cfg.projector_hidden, cfg.hidden, cfg.adapter_dim, cfg.layers
    out: List[Parameter] = []
    shared = cfg.variant == HYPERFORMER_PP
    conditional_ln = NO_CONDITIONAL_LN not in cfg.ablations
    z_dim = t if shared else cfg.feature_dim

    def add(name, data, owner=HYPER, task=None):
        out.append(Parameter(name, Tensor(data, requires_grad=True), owner, True, task))

    for name in task_names:
        add(f"task.{name}.z", _normal(rng, (z_dim,), 1.0), TASK_FEATURE, name)

    for s in STACKS:
        if shared:
            for i in range(L):
                add(f"hyper.{s}.layer_emb.{i}", _normal(rng, (t,), 1.0), TASK_FEATURE)
            for j in POSITIONS:
                add(f"hyper.{s}.pos_emb.{j}", _normal(rng, (t,), 1.0), TASK_FEATURE)
            add(f"hyper.{s}.proj.w1", _normal(rng, (3 * t, e), (3 * t) ** -0.5))
            add(f"hyper.{s}.proj.w2", _normal(rng, (e, t), e ** -0.5))
            add(f"hyper.{s}.proj_ln.gamma", np.ones(t))
            add(f"hyper.{s}.proj_ln.beta", np.zeros(t))
            heads = [f"hyper.{s}"]
        else:
            if NO_TASK_PROJECTOR not in cfg.ablations:
                add(f"hyper.{s}.proj.w1", _normal(rng, (z_dim, e), z_dim ** -0.5))
                add(f"hyper.{s}.proj.w2", _normal(rng, (e, t), e ** -0.5))
            heads = [f"hyper.{s}.{i}.{j}" for i in range(L) for j in POSITIONS]
        for prefix in heads:
            add(f"{prefix}.up", _normal(rng, (t, h * d), cfg.head_init_std))
            add(f"{prefix}.down", _normal(rng, (t, d * h), cfg.head_init_std))
            if conditional_ln:
                add(f"{prefix}.gamma", _normal(rng, (t, h), cfg.head_init_std))
                add(f"{prefix}.beta", _normal(rng, (t, h), cfg.head_init_std))
        if not conditional_ln:
            for i in range(L):
                for j in POSITIONS:
                    add(f"adapter.{s}.{i}.{j}.ln.gamma", np.ones(h))
                    add(f"adapter.{s}.{i}.{j}.ln.beta", np.zeros(h))
    return out


# ---------------------------------------------------------------------------
# generation


def project_task(P: Getter, cfg: ModelConfig, stack: str, z: Tensor) -> Tensor:
    """I = W2 ReLU(W1 z); identity when the projector is ablated."""
    if NO_TASK_PROJECTOR in cfg.ablations:
        if z.shape != (cfg.task_dim,):
            raise ValueError(f"without a projector z must have length {cfg.task_dim}, got {z.shape}")
        return z
    hidden = ad.relu(ad.linear(z, P(f"hyper.{stack}.proj.w1")))
    return ad.linear(hidden, P(f"hyper.{stack}.proj.w2"))


def project_task_shared(P: Getter, cfg: ModelConfig, stack: str, z: Tensor, layer: int, position: int,
                        layer_emb: Optional[Tensor] = None, pos_emb: Optional[Tensor] = None) -> Tensor:
    """I = LN(W2 ReLU(W1 [z; l_layer; p_position])).

    ``layer_emb``/``pos_emb`` override the learned embeddings (the task-only
    export feeds zero vectors here).
    """
    if not 0 <= layer < cfg.layers:
        raise IndexError(f"layer {layer} out of range for {cfg.layers} layers")
    if position not in POSITIONS:
        raise IndexError(f"adapter position {position} not in {POSITIONS}")
    l = layer_emb if layer_emb is not None else P(f"hyper.{stack}.layer_emb.{layer}")
    p = pos_emb if pos_emb is not None else P(f"hyper.{stack}.pos_emb.{position}")
    x = ad.concat([z, l, p], axis=0)
    hidden = ad.relu(ad.linear(x, P(f"hyper.{stack}.proj.w1")))
    out = ad.linear(hidden, P(f"hyper.{stack}.proj.w2"))
    return ad.layer_norm(out, P(f"hyper.{stack}.proj_ln.gamma"), P(f"hyper.{stack}.proj_ln.beta"), cfg.eps)


def generate_adapter(P: Getter, cfg: ModelConfig, head: str, I: Tensor):
    """(U, D) = (W^U I, W^D I) reshaped to [h, d] and [d, h]."""
    h, d = cfg.hidden, cfg.adapter_dim
    up = ad.reshape(ad.linear(I, P(f"{head}.up")), (h, d))
    down = ad.reshape(ad.linear(I, P(f"{head}.down")), (d, h))
    return up, down


def generate_layernorm(P: Getter, head: str, I: Tensor):
    """(gamma, beta) = (W^gamma I, W^beta I)."""
    return ad.linear(I, P(f"{head}.gamma")), ad.linear(I, P(f"{head}.beta"))


def head_name(cfg: ModelConfig, stack: str, layer: int, position: int) -> str:
    if cfg.variant == HYPERFORMER_PP:
        return f"hyper.{stack}"
    return f"hyper.{stack}.{layer}.{position}"


def task_embedding(P: Getter, cfg: ModelConfig, task: str, stack: str, layer: int, position: int) -> Tensor:
    z = P(f"task.{task}.z")
    if cfg.variant == HYPERFORMER_PP:
        return project_task_shared(P, cfg, stack, z, layer, position)
    return project_task(P, cfg, stack, z)


def generate_weights(P: Getter, cfg: ModelConfig, task: str, stack: str, layer: int, position: int,
                     I: Optional[Tensor] = None) -> GeneratedWeights:
    """All four adapter tensors for one (task, stack, layer, position)."""
    if I is None:
        I = task_embedding(P, cfg, task, stack, layer, position)
    head = head_name(cfg, stack, layer, position)
    up, down = generate_adapter(P, cfg, head, I)
    if NO_CONDITIONAL_LN in cfg.ablations:
        gamma = P(f"adapter.{stack}.{layer}.{position}.ln.gamma")
        beta = P(f"adapter.{stack}.{layer}.{position}.ln.beta")
    else:
        gamma, beta = generate_layernorm(P, head, I)
    return GeneratedWeights(up, down, gamma, beta)


class WeightCache:
    """Memoises generated weights until the model's parameters change.

    Entries are stamped with the parameter version they were built from; a
    lookup with a newer version drops every entry first.
    """

    def __init__(self):
        self._store: Dict[Hashable, GeneratedWeights] = {}
        self._version: Optional[int] = None
        self.generations = 0
        self.hits = 0

    def get(self, key: Hashable, version: int, build: Callable[[], GeneratedWeights]) -> GeneratedWeights:
        if version != self._version:
            assert self._version is None or version > self._version, "parameter version went backwards"
            self._store.clear()
            self._version = version
        found = self._store.get(key)
        if found is not None:
            self.hits += 1
            return found
        w = build()
        self.generations += 1
        self._store[key] = w
        return w

    def clear(self) -> None:
        self._store.clear()

    def __len__(self) -> int:
        return len(self._store)


# ---------------------------------------------------------------------------
# export


def task_only_embedding(P: Getter, cfg: ModelConfig, task: str, stack: str = "enc") -> np.ndarray:
    """Task embedding without structural conditioning (zero layer/position inputs)."""
    if cfg.variant not in (HYPERFORMER, HYPERFORMER_PP):
        raise ValueError(f"variant {cfg.variant} has no task embeddings")
    with ad.no_grad():
        z = P(f"task.{task}.z")
        if cfg.variant == HYPERFORMER_PP:
            zero = Tensor(np.zeros(cfg.task_dim))
            I = project_task_shared(P, cfg, stack, z, 0, 0, layer_emb=zero, pos_emb=zero)
        else:
            I = project_task(P, cfg, stack, z)
    return I.data.copy()


def export_task_embeddings(P: Getter, cfg: ModelConfig, tasks: List[str], path, stack: str = "enc") -> None:
    """One CSV row per task: ``task,dim0..dim{t-1}``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task"] + [f"dim{k}" for k in range(cfg.task_dim)])
        for task in tasks:
            w.writerow([task] + [repr(float(v)) for v in task_only_embedding(P, cfg, task, stack)])
