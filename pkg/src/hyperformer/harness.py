"""Multi-task training, evaluation, task transfer and checkpoint selection."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .config import ADAPTERS, ADAPTERS_SHARED_LN, FULL_FINETUNE, ModelConfig
from .tasks import TaskRegistry, TaskSpec, build_registry, subsample
from .transformer import Model, build_model, make_batch, strip_end

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "task", "split", "metric", "loss")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2 ** 13
    batch_size: int = 32
    learning_rate: float = 3e-4
    temperature: float = 10.0
    checkpoint_every: int = 250
    seed: int = 0
    optimizer: str = "adam"
    subsample: Optional[int] = None
    eval_examples: Optional[int] = None
    restore_best: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.steps < 1 or self.checkpoint_every < 1:
            raise ValueError("steps and checkpoint_every must be positive")
        if self.steps < self.checkpoint_every:
            raise ValueError("steps must be >= checkpoint_every")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class CheckpointScore:
    step: int
    metrics: Dict[str, float]

    @property
    def average(self) -> float:
        return float(np.mean(list(self.metrics.values())))


@dataclass
class TrainResult:
    model: Model
    history: List[CheckpointScore]
    best: CheckpointScore
    losses: List[tuple] = field(default_factory=list)  # (step, task, loss) per optimizer step


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.tensor.data) for p in self.params]
        self.v = [np.zeros_like(p.tensor.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.tensor.grad
            if g is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.tensor.data = p.tensor.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None


class SGD(Adam):
    def step(self) -> None:
        self.t += 1
        for p in self.params:
            if p.tensor.grad is not None:
                p.tensor.data = p.tensor.data - self.lr * p.tensor.grad


def make_optimizer(model: Model, cfg: TrainConfig):
    params = model.parameters(trainable=True)
    return (Adam if cfg.optimizer == "adam" else SGD)(params, cfg.learning_rate)


def sample_task(registry: TaskRegistry, temperature: float, rng: np.random.Generator) -> str:
    """Draw a task with probability proportional to p_tau ** (1 / temperature)."""
    if not len(registry):
        raise ValueError("empty task registry")
    probs = registry.sampling_probabilities(temperature)
    return registry.names[int(rng.choice(len(probs), p=probs))]


class _TaskStream:
    """Cycles through one task's training data, reshuffling on each pass."""

    def __init__(self, examples, rng: np.random.Generator):
        if not examples:
            raise ValueError("cannot stream an empty dataset")
        self.examples = examples
        self.rng = rng
        self.order = rng.permutation(len(examples))
        self.pos = 0

    def next(self, n: int):
        out = []
        while len(out) < n:
            if self.pos == len(self.order):
                self.order = self.rng.permutation(len(self.examples))
                self.pos = 0
            take = min(n - len(out), len(self.order) - self.pos)
            out.extend(self.examples[i] for i in self.order[self.pos: self.pos + take])
            self.pos += take
        return out


def evaluate(model: Model, registry: TaskRegistry, task: str, split: str,
             max_examples: Optional[int] = None, batch_size: int = 256) -> float:
    """Sequence-level exact-match accuracy of greedy decodes, in [0, 1]."""
    examples = registry.split(task, split)
    if max_examples is not None:
        examples = examples[:max_examples]
    if not examples:
        raise ValueError(f"split {split!r} of task {task!r} is empty")
    max_steps = max(len(e.target) for e in examples) + 1
    correct = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start: start + batch_size]
        preds = model.decode_greedy([e.source for e in chunk], task, max_steps)
        correct += sum(strip_end(p) == tuple(e.target) for p, e in zip(preds, chunk))
    return correct / len(examples)


def evaluation_loss(model: Model, registry: TaskRegistry, task: str, split: str,
                    max_examples: Optional[int] = None) -> float:
    examples = registry.split(task, split)[:max_examples]
    with ad.no_grad():
        return model.loss(make_batch(examples), task).item()


def select_best(history: Sequence[CheckpointScore]) -> CheckpointScore:
    """Checkpoint with the highest average metric; the earliest step wins ties."""
    if not history:
        raise ValueError("no checkpoints to select from")
    best = history[0]
    for score in history[1:]:
        if score.average > best.average:
            best = score
    return best


def train(model: Model, registry: TaskRegistry, config: TrainConfig, run_dir=None,
          on_checkpoint: Optional[Callable[[CheckpointScore], None]] = None) -> TrainResult:
    """Temperature-sampled multi-task training of the trainable parameters.

    Each optimizer step draws one task, one batch from it, and updates only
    parameters whose ``trainable`` flag is set.  Every ``checkpoint_every``
    steps all tasks are scored on validation; with ``restore_best`` the model
    ends at the checkpoint with the best average.
    """
    missing = [n for n in registry.names if n not in model.task_names]
    if missing:
        raise KeyError(f"tasks not known to the model: {missing}")
    for name in registry.names:
        if not registry.split(name, "train"):
            raise ValueError(f"task {name!r} has no training data")
    rng = np.random.default_rng(config.seed)
    stream_seeds = np.random.SeedSequence([config.seed, 1]).spawn(len(registry))
    streams = {n: _TaskStream(registry.split(n, "train"), np.random.default_rng(s))
               for n, s in zip(registry.names, stream_seeds)}
    probs = registry.sampling_probabilities(config.temperature)
    opt = make_optimizer(model, config)
    run_dir = Path(run_dir) if run_dir is not None else None
    metrics_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(run_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)

    history: List[CheckpointScore] = []
    losses: List[tuple] = []
    best_state, best = None, None
    window: Dict[str, List[float]] = {n: [] for n in registry.names}
    t0 = time.time()
    try:
        for step in range(1, config.steps + 1):
            task = registry.names[int(rng.choice(len(probs), p=probs))]
            batch = make_batch(streams[task].next(config.batch_size))
            try:
                loss = model.loss(batch, task)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}, task {task}: {exc}") from exc
            loss.backward()
            opt.step()
            opt.zero_grad()
            model.mark_updated()
            value = loss.item()
            losses.append((step, task, value))
            window[task].append(value)

            if step % config.checkpoint_every == 0:
                metrics = {n: evaluate(model, registry, n, "validation", config.eval_examples)
                           for n in registry.names}
                score = CheckpointScore(step, metrics)
                history.append(score)
                if metrics_fh is not None:
                    for n in registry.names:
                        train_loss = float(np.mean(window[n])) if window[n] else float("nan")
                        writer.writerow([step, n, "validation", repr(metrics[n]), repr(train_loss)])
                    metrics_fh.flush()
                    ckpt.save(model, run_dir / f"ckpt-{step:06d}", step=step)
                window = {n: [] for n in registry.names}
                if best is None or score.average > best.average:
                    best, best_state = score, model.state()
                log.info("step %d avg %.4f (%.1fs)", step, score.average, time.time() - t0)
                if on_checkpoint is not None:
                    on_checkpoint(score)
        if config.restore_best and best_state is not None:
            for name, value in best_state.items():
                model.params[name].tensor.data = value
            model.mark_updated()
        if run_dir is not None and best is not None:
            (run_dir / "best").write_text(f"ckpt-{best.step:06d}\n")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(model, history, best, losses)


def transfer_init(model: Model, source: str, target: str, mode: str = "task-embedding") -> Model:
    """Initialise ``target``'s task-specific parameters from ``source``'s."""
    cfg = model.config
    model.task_index(source)
    model.task_index(target)
    if mode == "task-embedding":
        if not cfg.is_hyper:
            raise ValueError(f"mode {mode!r} needs a hypernetwork variant, not {cfg.variant}")
        model.set_value(f"task.{target}.z", model.P(f"task.{source}.z").data)
    elif mode == "adapter-weights":
        if cfg.variant not in (ADAPTERS, ADAPTERS_SHARED_LN):
            raise ValueError(f"mode {mode!r} needs an adapters variant, not {cfg.variant}")
        for p in model.parameters():
            if p.task == source:
                model.set_value(p.name.replace(f"@{source}", f"@{target}"), p.tensor.data)
    else:
        raise ValueError(f"unknown transfer mode {mode!r}")
    return model


def denoising_spec(alphabet: int = 10, min_len: int = 3, max_len: int = 8, n_train: int = 20000,
                   noise: float = 0.15, seed: int = 0) -> TaskSpec:
    return TaskSpec("denoise", "denoise", alphabet=alphabet, min_len=min_len, max_len=max_len,
                    n_train=n_train, n_validation=100, n_test=100, seed=seed, noise=noise)


def pretrain_base(config: ModelConfig, spec: Optional[TaskSpec] = None,
                  train_config: Optional[TrainConfig] = None, seed: int = 0) -> Model:
    """Train a full fine-tuning model on the denoising corpus.

    The result supplies base weights for ``load_base_weights``.  Adapter and
    hypernetwork variants freeze those weights, so starting them from a random
    base leaves nothing useful to condition.
    """
    spec = spec or denoising_spec()
    train_config = train_config or TrainConfig(steps=2000, learning_rate=1e-3, checkpoint_every=2000,
                                               eval_examples=100, seed=seed)
    base_cfg = config.replace(variant=FULL_FINETUNE, ablations=frozenset())
    registry = build_registry([spec], config.vocab)
    model = build_model(base_cfg, registry, seed)
    train(model, registry, train_config)
    return model


def extend_tasks(model: Model, new_tasks: Sequence[str], seed: int) -> Model:
    """Copy of ``model`` with extra tasks; new task parameters are freshly drawn."""
    bigger = build_model(model.config, list(model.task_names) + list(new_tasks), seed)
    for name, p in model.params.items():
        bigger.params[name].tensor.data = p.tensor.data.copy()
    bigger.mark_updated()
    return bigger


def transfer_mode(model: Model) -> str:
    return "task-embedding" if model.config.is_hyper else "adapter-weights"


ARMS = ("embedding-init", "random-init")


def few_shot(model: Model, registry: TaskRegistry, source: str, target: str, arm: str, shots: int,
             seed: int, config: TrainConfig) -> float:
    """Fine-tune a copy of ``model`` on ``shots`` target examples; test exact-match.

    The ``embedding-init`` arm starts the target from the source task's
    embedding (or adapters); ``random-init`` keeps the fresh draw.
    """
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}")
    m = extend_tasks(model, [target], seed)
    if arm == "embedding-init":
        transfer_init(m, source, target, transfer_mode(m))
    small = subsample(registry.subset([target]), shots, seed)
    train(m, small, config)
    return evaluate(m, small, target, "test")
