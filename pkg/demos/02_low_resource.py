"""Adapters versus the shared hypernetwork as training data shrinks.

Pretrains a small base on denoising, then for each per-task budget trains
both variants on copy/reverse/shift with that many examples per task and
reports the average test exact-match. With the defaults this takes roughly
twenty minutes on one CPU core; pass a smaller step count for a quick look.

    python demos/02_low_resource.py [steps] [sizes...]
    python demos/02_low_resource.py 1000 64 256
"""

import sys
import time

import numpy as np

from hyperformer.config import ModelConfig
from hyperformer.harness import TrainConfig, evaluate, pretrain_base, train
from hyperformer.tasks import TaskSpec, build_registry, subsample
from hyperformer.transformer import build_model, load_base_weights

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
sizes = [int(a) for a in sys.argv[2:]] or [32, 128, 512]

cfg = ModelConfig(layers=2, hidden=64, heads=4, d_ff=128, vocab=16, max_len=16, adapter_dim=8, task_dim=16,
                  projector_hidden=32)
tasks = [TaskSpec("copy", "copy", seed=0), TaskSpec("reverse", "reverse", seed=1),
         TaskSpec("shift1", "shift", shift=1, seed=2)]
full = build_registry(tasks, cfg.vocab)

t0 = time.time()
base = pretrain_base(cfg)
print(f"pretrained base in {time.time() - t0:.0f}s")

print(f"{'examples':>8}  {'adapters':>9}  {'hyperformer++':>13}")
for n in sizes:
    reg = subsample(full, n, seed=0)
    scores = []
    for variant in ("adapters", "hyperformer++"):
        model = build_model(cfg.replace(variant=variant), reg, 0)
        load_base_weights(model, base)
        train(model, reg, TrainConfig(steps=steps, checkpoint_every=max(steps // 4, 1), eval_examples=100))
        scores.append(np.mean([evaluate(model, reg, t, "test") for t in reg.names]))
    print(f"{n:>8}  {scores[0]:>9.3f}  {scores[1]:>13.3f}")
