"""Reusing a learned task embedding for a new, related task.

Trains hyperformer++ on copy/reverse/shift1, writes the learned task
embeddings to CSV, then fine-tunes on a handful of shift-2 examples twice:
once starting from the shift-1 embedding and once from a fresh draw.

    python demos/03_transfer_and_embeddings.py [steps] [shots] [seeds]
"""

import sys
from pathlib import Path

import numpy as np

from hyperformer.config import ModelConfig
from hyperformer.harness import ARMS, TrainConfig, few_shot, pretrain_base, train
from hyperformer.hypernet import export_task_embeddings
from hyperformer.tasks import TaskSpec, build_registry
from hyperformer.transformer import build_model, load_base_weights

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 4096
shots = int(sys.argv[2]) if len(sys.argv) > 2 else 32
seeds = int(sys.argv[3]) if len(sys.argv) > 3 else 3

cfg = ModelConfig(layers=2, hidden=64, heads=4, d_ff=128, vocab=16, max_len=16, adapter_dim=8, task_dim=16,
                  projector_hidden=32, variant="hyperformer++")
reg = build_registry([TaskSpec("copy", "copy", seed=0), TaskSpec("reverse", "reverse", seed=1),
                      TaskSpec("shift1", "shift", shift=1, seed=2)], cfg.vocab)

model = build_model(cfg, reg, 0)
load_base_weights(model, pretrain_base(cfg))
result = train(model, reg, TrainConfig(steps=steps, checkpoint_every=min(256, steps), eval_examples=100))
print(f"best step {result.best.step}, validation average {result.best.average:.3f}")

out = Path("task_embeddings.csv")
export_task_embeddings(model.P, cfg, list(model.task_names), out)
emb = {line.split(",")[0]: np.array(line.split(",")[1:], float) for line in out.read_text().splitlines()[1:]}
print(f"wrote {out}; cosine similarities:")
names = list(emb)
for i, a in enumerate(names):
    for b in names[i + 1:]:
        cos = emb[a] @ emb[b] / (np.linalg.norm(emb[a]) * np.linalg.norm(emb[b]))
        print(f"  {a:>8} {b:<8} {cos:+.3f}")

target = build_registry([TaskSpec("shift2", "shift", shift=2, seed=3)], cfg.vocab)
for arm in ARMS:
    acc = [few_shot(model, target, "shift1", "shift2", arm, shots, seed,
                    TrainConfig(steps=400, checkpoint_every=400, seed=seed, restore_best=False))
           for seed in range(seeds)]
    print(f"{arm:>15}: {np.mean(acc):.3f}±{np.std(acc):.3f}  ({shots} shots, {seeds} seeds)")
