"""Where the trainable parameters go, per variant.

Builds every variant at a small size, counts parameters by owner and checks
the counts against the closed forms. Then prints the closed forms at base
scale, and shows the task count at which one shared hypernetwork becomes
cheaper than per-task adapters.

    python demos/01_parameter_budget.py
"""

from hyperformer import accounting as acc
from hyperformer.config import VARIANTS, ModelConfig
from hyperformer.transformer import build_model

TASKS = ["copy", "reverse", "shift1", "shift2"]

cfg = ModelConfig(layers=2, hidden=64, heads=4, d_ff=128, vocab=16, adapter_dim=8, task_dim=16,
                  projector_hidden=32)
budgets = []
for variant in VARIANTS:
    model = build_model(cfg.replace(variant=variant), TASKS, 0)
    budgets.append(acc.enumerate_budget(model))
    checked = acc.check_against_formula(model)
    if checked is not None:
        got, formula, slack = checked
        print(f"{variant:<20} enumerated {got:>7}  closed form {formula:>7}  (slack {slack})")

print()
print(acc.report(budgets))

s = acc.T5_BASE_SCALE
print(f"base scale {s}:")
print(f"  per-task adapters     {acc.formula_adapters(s['T'], s['L'], s['h'], s['d']):>12,}")
print(f"  shared hypernetwork   {acc.formula_hyperformer_pp(**s):>12,}")

# the shared network pays a fixed cost up front, adapters pay per task
for dims in [(2, 64, 8, 16, 32), (12, 768, 24, 64, 128)]:
    L, h, d, t, e = dims
    T = acc.crossover_tasks(*dims)
    print(f"L={L} h={h} d={d} t={t} e={e}: shared network is smaller from T={T} tasks on")
