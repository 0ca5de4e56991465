"""Parameter budgets: closed-form counts and enumeration of built models.

The closed forms count only the task-conditioning parameters (adapters and
their layer norms, or hypernetworks plus embeddings).  Enumeration walks a
model's registry and sums extents per owner tag, which is the ground truth
the formulas are checked against.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .config import (
    ADAPTER,
    ADAPTERS,
    ADAPTERS_SHARED_LN,
    BASE,
    BASE_LN,
    HYPER,
    HYPERFORMER,
    HYPERFORMER_PP,
    NO_ADAPTERS,
    NO_CONDITIONAL_LN,
    NO_TASK_PROJECTOR,
    OWNERS,
    TASK_FEATURE,
    ModelConfig,
)
from .transformer import Model

# T5-Base sized dimensions with eight tasks
T5_BASE_SCALE = dict(T=8, L=12, h=768, d=24, t=64, e=128)


def formula_adapters(T: int, L: int, h: int, d: int) -> int:
    """4TL(2hd + 2h): one adapter with its own layer norm per task, block position and stack."""
    return 4 * T * L * (2 * h * d + 2 * h)


def formula_adapters_shared_ln(T: int, L: int, h: int, d: int) -> int:
    """Per-task projections with a single layer norm per attachment point."""
    return 4 * L * (T * 2 * h * d + 2 * h)


def formula_hyperformer_pp(T: int, L: int, h: int, d: int, t: int, e: int) -> int:
    """t(T + 4 + 2L) embeddings + 8te projector + 2t(2hd + 2h) heads.

    The shared layer norm after each stack's projector (2t per stack) is not
    part of this count; see ``SHARED_LN_SLACK``.
    """
    return t * (T + 4 + 2 * L) + 8 * t * e + 2 * t * (2 * h * d + 2 * h)


def formula_hyperformer(T: int, L: int, h: int, d: int, t: int, e: int, t_feat: int) -> int:
    """Per-layer heads: T t' features + 2(t'e + et) projectors + 4Lt(2hd + 2h) heads."""
    return T * t_feat + 2 * (t_feat * e + e * t) + 4 * L * t * (2 * h * d + 2 * h)


def shared_ln_slack(t: int) -> int:
    """Parameters of the two post-projector layer norms (gamma, beta of length t each)."""
    return 4 * t


def crossover_tasks(L: int, h: int, d: int, t: int, e: int) -> Optional[int]:
    """Smallest T at which the shared hypernetwork needs fewer parameters than adapters.

    Both counts are affine in T; returns None when the adapter slope does not
    exceed the per-task embedding cost, so no crossover exists.
    """
    per_task = formula_adapters(1, L, h, d)
    if per_task <= t:
        return None
    fixed = formula_hyperformer_pp(0, L, h, d, t, e)
    T = fixed // (per_task - t) + 1
    while T > 1 and formula_hyperformer_pp(T - 1, L, h, d, t, e) < formula_adapters(T - 1, L, h, d):
        T -= 1
    return T


@dataclass
class Budget:
    variant: str
    tasks: int
    owners: Dict[str, int]
    total: int
    trainable: int
    base_size: int

    @property
    def per_task_trainable(self) -> float:
        """Trainable parameters divided evenly across tasks."""
        return self.trainable / self.tasks

    @property
    def fraction_of_base(self) -> float:
        return self.per_task_trainable / self.base_size

    @property
    def conditioning(self) -> int:
        """Parameters that exist only to condition the base model on tasks."""
        return self.owners[ADAPTER] + self.owners[HYPER] + self.owners[TASK_FEATURE]


def enumerate_budget(model: Model) -> Budget:
    owners = {o: 0 for o in OWNERS}
    trainable = 0
    for p in model.params.values():
        owners[p.owner] += p.size
        if p.trainable:
            trainable += p.size
    T = len(model.task_names)
    base_ln = owners[BASE_LN] // T if model.config.variant == ADAPTERS else owners[BASE_LN]
    return Budget(model.config.variant, T, owners, sum(owners.values()), trainable, owners[BASE] + base_ln)


def expected_conditioning(cfg: ModelConfig, T: int) -> Optional[Tuple[int, int]]:
    """(formula count, allowed excess) for the conditioning parameters of ``cfg``.

    Returns None for configurations no closed form covers.
    """
    L, h, d, t, e = cfg.layers, cfg.hidden, cfg.adapter_dim, cfg.task_dim, cfg.projector_hidden
    ab = cfg.ablations
    if cfg.variant == ADAPTERS:
        return formula_adapters(T, L, h, d), 0
    if cfg.variant == ADAPTERS_SHARED_LN:
        return formula_adapters_shared_ln(T, L, h, d), 0
    if NO_ADAPTERS in ab or NO_CONDITIONAL_LN in ab:
        return None
    if cfg.variant == HYPERFORMER_PP:
        return formula_hyperformer_pp(T, L, h, d, t, e), shared_ln_slack(t)
    if cfg.variant == HYPERFORMER and NO_TASK_PROJECTOR not in ab:
        return formula_hyperformer(T, L, h, d, t, e, cfg.feature_dim), 0
    return None


def check_against_formula(model: Model) -> Optional[Tuple[int, int, int]]:
    """(enumerated, formula, slack) or None; raises ValueError on a mismatch."""
    expected = expected_conditioning(model.config, len(model.task_names))
    if expected is None:
        return None
    formula, slack = expected
    got = enumerate_budget(model).conditioning
    if not formula <= got <= formula + slack:
        raise ValueError(f"{model.config.variant}: enumerated {got} conditioning parameters, "
                         f"formula gives {formula} (+{slack} allowed)")
    return got, formula, slack


COLUMNS = ("variant", "tasks", "total", "trainable", "base", "base-layer-norm", "hyper",
           "task-feature", "adapter", "per_task_trainable", "fraction_of_base")


def _row(b: Budget) -> List:
    return [b.variant, b.tasks, b.total, b.trainable, b.owners[BASE], b.owners[BASE_LN], b.owners[HYPER],
            b.owners[TASK_FEATURE], b.owners[ADAPTER], f"{b.per_task_trainable:.2f}", f"{b.fraction_of_base:.6f}"]


def report(budgets: Sequence[Budget], format: str = "table") -> str:
    rows = [list(COLUMNS)] + [[str(v) for v in _row(b)] for b in budgets]
    if format == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        return buf.getvalue()
    if format != "table":
        raise ValueError(f"unknown report format {format!r}")
    widths = [max(len(r[k]) for r in rows) for k in range(len(COLUMNS))]
    lines = ["  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths))) for r in rows]
    return "\n".join(lines) + "\n"
