"""Synthetic sequence-to-sequence tasks, JSONL ingestion and task registries.

Token ids 0, 1 and 2 are reserved for padding, end-of-sequence and unknown
tokens; content tokens start at 3.

Besides the transformation tasks there is a ``denoise`` generator whose
source is the target with a fraction of tokens replaced by ``UNK``.  It is the
task-agnostic corpus used to pretrain a base model before the base is frozen.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

PAD, END, UNK = 0, 1, 2
FIRST_CONTENT = 3
SPLITS = ("train", "validation", "test")
GENERATORS = ("copy", "reverse", "sort", "shift", "modsum", "denoise")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    source: Tuple[int, ...]
    target: Tuple[int, ...]
    task: str


@dataclass(frozen=True)
class TaskSpec:
    name: str
    generator: str
    alphabet: int = 10
    min_len: int = 3
    max_len: int = 8
    shift: int = 1
    n_train: int = 1000
    n_validation: int = 100
    n_test: int = 200
    seed: int = 0
    noise: float = 0.15  # denoise only: probability of masking a token

    def split_sizes(self) -> Dict[str, int]:
        return {"train": self.n_train, "validation": self.n_validation, "test": self.n_test}


def transform(generator: str, source: Sequence[int], alphabet: int, shift: int = 1) -> Tuple[int, ...]:
    """Target sequence for ``source`` under one of the synthetic generators."""
    s = tuple(int(x) for x in source)
    if generator == "copy":
        return s
    if generator == "reverse":
        return s[::-1]
    if generator == "sort":
        return tuple(sorted(s))
    if generator == "shift":
        return tuple(FIRST_CONTENT + (x - FIRST_CONTENT + shift) % alphabet for x in s)
    if generator == "modsum":
        return (FIRST_CONTENT + sum(x - FIRST_CONTENT for x in s) % alphabet,)
    if generator == "denoise":
        raise ValueError("denoise targets are not a function of the source")
    raise ValueError(f"unknown generator {generator!r}")


def _sequence_space(spec: TaskSpec) -> int:
    return sum(spec.alphabet ** n for n in range(spec.min_len, spec.max_len + 1))


def generate(spec: TaskSpec, vocab: Optional[int] = None) -> Dict[str, List[Example]]:
    """Deterministic train/validation/test splits for ``spec``.

    Each split draws from its own child seed stream.  When the sequence space
    is large enough, sources already used by an earlier split are redrawn so
    the splits are disjoint.
    """
    if spec.generator not in GENERATORS:
        raise ValueError(f"unknown generator {spec.generator!r}")
    if spec.alphabet < 1 or spec.min_len < 1 or spec.max_len < spec.min_len:
        raise ValueError(f"invalid task spec {spec}")
    if not 0.0 <= spec.noise < 1.0:
        raise ValueError(f"noise must lie in [0, 1), got {spec.noise}")
    if vocab is not None and FIRST_CONTENT + spec.alphabet > vocab:
        raise ValueError(f"alphabet {spec.alphabet} does not fit a vocabulary of {vocab}")
    total = sum(spec.split_sizes().values())
    space = _sequence_space(spec)
    disjoint = space >= 2 * total
    if not disjoint:
        log.info("task %s: sequence space %d too small for disjoint splits", spec.name, space)
    streams = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    held_out: set = set()
    out: Dict[str, List[Example]] = {}
    # evaluation splits are drawn first so training data never leaks into them
    for split in ("test", "validation", "train"):
        rng = np.random.default_rng(streams[SPLITS.index(split)])
        examples = []
        while len(examples) < spec.split_sizes()[split]:
            n = int(rng.integers(spec.min_len, spec.max_len + 1))
            src = tuple(int(x) for x in FIRST_CONTENT + rng.integers(0, spec.alphabet, size=n))
            if disjoint and src in held_out:
                continue
            if split != "train":
                held_out.add(src)
            if spec.generator == "denoise":
                masked = rng.random(n) < spec.noise
                examples.append(Example(tuple(UNK if m else x for m, x in zip(masked, src)), src, spec.name))
            else:
                examples.append(Example(src, transform(spec.generator, src, spec.alphabet, spec.shift), spec.name))
        out[split] = examples
    return {s: out[s] for s in SPLITS}


@dataclass
class TaskRegistry:
    """Ordered collection of tasks and their splits."""

    datasets: Dict[str, Dict[str, List[Example]]] = field(default_factory=dict)
    specs: Dict[str, TaskSpec] = field(default_factory=dict)

    @property
    def names(self) -> List[str]:
        return list(self.datasets)

    def __len__(self) -> int:
        return len(self.datasets)

    def __contains__(self, name) -> bool:
        return name in self.datasets

    def add(self, name: str, splits: Dict[str, List[Example]], spec: Optional[TaskSpec] = None) -> None:
        if name in self.datasets:
            raise ValueError(f"task {name!r} already registered")
        self.datasets[name] = {s: list(splits.get(s, [])) for s in SPLITS}
        if spec is not None:
            self.specs[name] = spec

    def split(self, name: str, split: str) -> List[Example]:
        if name not in self.datasets:
            raise KeyError(f"unknown task {name!r}")
        return self.datasets[name][split]

    def sizes(self) -> np.ndarray:
        return np.array([len(self.datasets[n]["train"]) for n in self.names], dtype=np.float64)

    def proportions(self) -> np.ndarray:
        sizes = self.sizes()
        if not len(sizes) or sizes.sum() <= 0:
            raise ValueError("registry has no training data")
        return sizes / sizes.sum()

    def sampling_probabilities(self, temperature: float) -> np.ndarray:
        """p_i^(1/temperature), renormalised, with p_i the share of training examples."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        p = self.proportions()
        w = np.where(p > 0, p, 0.0) ** (1.0 / temperature)
        return w / w.sum()

    def subset(self, names: Iterable[str]) -> "TaskRegistry":
        out = TaskRegistry()
        for n in names:
            out.add(n, self.datasets[n], self.specs.get(n))
        return out


def build_registry(specs: Sequence[TaskSpec], vocab: Optional[int] = None) -> TaskRegistry:
    reg = TaskRegistry()
    for spec in specs:
        reg.add(spec.name, generate(spec, vocab), spec)
    return reg


def imbalance_profile(specs: Sequence[TaskSpec], sizes: Optional[Sequence[int]] = None,
                      vocab: Optional[int] = None) -> TaskRegistry:
    """Registry with deliberately skewed training-set sizes.

    ``sizes`` overrides each spec's ``n_train``; by default the first task
    gets ten times the data of the others.
    """
    if sizes is None:
        base = specs[0].n_train if specs else 0
        sizes = [base] + [max(1, base // 10)] * (len(specs) - 1)
    if len(sizes) != len(specs):
        raise ValueError("one size per spec required")
    return build_registry([dataclasses.replace(s, n_train=int(n)) for s, n in zip(specs, sizes)], vocab)


def subsample(registry: TaskRegistry, n: int, seed: int) -> TaskRegistry:
    """Keep ``n`` training examples per task, drawn without replacement.

    Validation and test splits are left untouched.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = TaskRegistry()
    for i, name in enumerate(registry.names):
        splits = registry.datasets[name]
        train = splits["train"]
        k = n
        if k > len(train):
            log.warning("task %s has %d training examples; clamping subsample of %d", name, len(train), n)
            k = len(train)
        rng = np.random.default_rng([seed, i])
        idx = np.sort(rng.choice(len(train), size=k, replace=False))
        new = dict(splits)
        new["train"] = [train[j] for j in idx]
        out.add(name, new, registry.specs.get(name))
    return out


# ---------------------------------------------------------------------------
# JSONL


@dataclass
class JsonlDataset:
    examples: List[Example]
    splits: List[str]
    vocab: Dict[str, int]

    def to_registry(self) -> TaskRegistry:
        grouped: Dict[str, Dict[str, List[Example]]] = {}
        for ex, split in zip(self.examples, self.splits):
            grouped.setdefault(ex.task, {s: [] for s in SPLITS})[split].append(ex)
        reg = TaskRegistry()
        for name, splits in grouped.items():
            reg.add(name, splits)
        return reg


def ingest_jsonl(path, vocab: Optional[Dict[str, int]] = None, grow: bool = True) -> JsonlDataset:
    """Read ``{"task", "input", "target"}`` records, one per line.

    Tokens are whitespace-separated.  With ``grow`` the vocabulary is extended
    in first-seen order; otherwise unknown tokens map to ``UNK``.  An optional
    ``split`` field selects train/validation/test (default train).
    """
    vocab = dict(vocab) if vocab is not None else {"<pad>": PAD, "</s>": END, "<unk>": UNK}
    examples, splits = [], []

    def ids(text):
        out = []
        for tok in text.split():
            if tok not in vocab and grow:
                vocab[tok] = len(vocab)
            out.append(vocab.get(tok, UNK))
        return tuple(out)

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetFormatError(f"line {lineno}: expected an object")
            for key in ("task", "input", "target"):
                if not isinstance(rec.get(key), str):
                    raise DatasetFormatError(f"line {lineno}: missing or non-string field {key!r}")
            split = rec.get("split", "train")
            if split not in SPLITS:
                raise DatasetFormatError(f"line {lineno}: unknown split {split!r}")
            src, tgt = ids(rec["input"]), ids(rec["target"])
            if not src or not tgt:
                raise DatasetFormatError(f"line {lineno}: empty input or target")
            examples.append(Example(src, tgt, rec["task"]))
            splits.append(split)
    return JsonlDataset(examples, splits, vocab)


def export_jsonl(registry: TaskRegistry, path, vocab: Optional[Dict[str, int]] = None) -> None:
    """Write every split of every task in the ingestion format."""
    inv = {v: k for k, v in vocab.items()} if vocab else None

    def text(seq):
        return " ".join(inv.get(t, "<unk>") if inv else str(t) for t in seq)

    with open(path, "w", encoding="utf-8") as fh:
        for name in registry.names:
            for split in SPLITS:
                for ex in registry.datasets[name][split]:
                    rec = {"task": name, "input": text(ex.source), "target": text(ex.target), "split": split}
                    fh.write(json.dumps(rec) + "\n")
