"""Key=value run configuration files.

One ``key = value`` pair per line; ``#`` starts a comment.  Later sources
override earlier ones: built-in defaults, then the file, then ``--set``
overrides in command-line order.  A fully resolved configuration is written
back in the same format as the run manifest, so a manifest can be fed to
``train`` again to reproduce the run.

Tasks are declared one per key as ``task.<name> = <generator>[:field=value,...]``
where the fields are those of :class:`~hyperformer.tasks.TaskSpec`, e.g.
``task.shift1 = shift:shift=1,n_train=2000``.  Alternatively ``data`` names a
JSONL dataset.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ABLATIONS, ConfigError, ModelConfig
from .harness import TrainConfig, denoising_spec
from .tasks import GENERATORS, TaskSpec

# key -> (section, help).  Defaults come from the dataclasses.
MODEL_KEYS = {
    "layers": "blocks per stack (L)",
    "hidden": "hidden size (h)",
    "heads": "attention heads; must divide hidden",
    "d_ff": "feed-forward inner size",
    "vocab": "vocabulary size including the three reserved ids",
    "max_len": "longest source or target sequence, in tokens",
    "adapter_dim": "adapter bottleneck (d); 'none' derives it from reduction",
    "reduction": "reduction factor r with d = h / r; 'none' to give adapter_dim directly",
    "variant": "full-finetune, adapters, adapters-shared-ln, hyperformer or hyperformer++",
    "task_dim": "task embedding width (t)",
    "feature_dim": "task feature width for hyperformer (t')",
    "projector_hidden": "task projector hidden width (e)",
    "ablations": "comma-separated subset of " + ", ".join(ABLATIONS) + "; empty for none",
    "eps": "layer-norm epsilon",
    "base_init_std": "std of the truncated normal for base weights",
    "embed_init_std": "std of the truncated normal for the token embedding",
    "head_init_std": "std of hypernetwork heads and adapter layer-norm scales",
}
TRAIN_KEYS = {
    "steps": "optimizer steps",
    "batch_size": "examples per step, all from one sampled task",
    "learning_rate": "constant learning rate",
    "temperature": "task sampling temperature",
    "checkpoint_every": "steps between validation passes and checkpoints",
    "seed": "seed for model initialisation, task sampling and batching",
    "optimizer": "adam or sgd",
    "subsample": "training examples kept per task; 'none' keeps all",
    "eval_examples": "validation examples scored per task at checkpoints; 'none' for all",
}
OTHER_KEYS = {
    "data": "JSONL dataset used instead of task.* generators; 'none' to use generators",
    "base_checkpoint": "checkpoint whose base weights are loaded; 'none' to pretrain or use random weights",
    "pretrain.steps": "denoising pretraining steps for the base model; 0 keeps the random base",
    "pretrain.learning_rate": "pretraining learning rate",
    "pretrain.batch_size": "pretraining batch size",
    "pretrain.examples": "size of the denoising corpus",
    "pretrain.noise": "fraction of corpus tokens replaced by the unknown token",
    "pretrain.seed": "seed of the pretrained base model and its corpus",
}
TASK_PATTERN = "task.<name>"
TASK_HELP = "generator[:field=value,...] with generator one of " + ", ".join(GENERATORS)
ARTIFACT_PREFIX = "artifact."  # informational manifest entries, ignored on input

_TASK_FIELDS = {f.name: f.type for f in dataclasses.fields(TaskSpec) if f.name not in ("name", "generator")}


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 32
    examples: int = 20000
    noise: float = 0.15
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    tasks: List[TaskSpec] = field(default_factory=list)
    data: Optional[str] = None
    base_checkpoint: Optional[str] = None
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def pretrain_spec(self, alphabet: int) -> TaskSpec:
        p = self.pretrain
        lengths = [(s.min_len, s.max_len) for s in self.tasks] or [(3, 8)]
        return denoising_spec(alphabet=alphabet, min_len=min(a for a, _ in lengths),
                              max_len=max(b for _, b in lengths), n_train=p.examples, noise=p.noise, seed=p.seed)

    def pretrain_train_config(self) -> TrainConfig:
        p = self.pretrain
        return TrainConfig(steps=p.steps, batch_size=p.batch_size, learning_rate=p.learning_rate,
                           checkpoint_every=p.steps, eval_examples=100, seed=p.seed)


def documented_keys() -> Dict[str, str]:
    out = dict(MODEL_KEYS)
    out.update(TRAIN_KEYS)
    out.update(OTHER_KEYS)
    out[TASK_PATTERN] = TASK_HELP
    return out


def parse_lines(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def parse_override(text: str) -> Tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not key=value")
    return key.strip(), value.strip()


def _convert(key: str, value: str, kind):
    kind = str(kind)
    if value.lower() == "none" and "Optional" in kind:
        return None
    try:
        if "int" in kind:
            return int(value)
        if "float" in kind:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value


def parse_task_spec(name: str, text: str) -> TaskSpec:
    generator, _, rest = text.partition(":")
    generator = generator.strip()
    if generator not in GENERATORS:
        raise ConfigError(f"task.{name}: unknown generator {generator!r}")
    kwargs = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        k, sep, v = item.partition("=")
        k = k.strip()
        if not sep or k not in _TASK_FIELDS:
            raise ConfigError(f"task.{name}: unknown task field {k!r}")
        kwargs[k] = _convert(f"task.{name}.{k}", v.strip(), _TASK_FIELDS[k])
    return TaskSpec(name, generator, **kwargs)


def render_task_spec(spec: TaskSpec) -> str:
    fields = ",".join(f"{k}={getattr(spec, k)!r}" for k in _TASK_FIELDS)
    return f"{spec.generator}:{fields}"


def _dataclass_kwargs(cls, keys, values: Dict[str, str], prefix: str = ""):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    out = {}
    for key in keys:
        full = prefix + key
        if full in values:
            if key == "ablations":
                out[key] = frozenset(a.strip() for a in values[full].split(",") if a.strip())
            else:
                out[key] = _convert(full, values[full], types[key])
    return out


def resolve(values: Dict[str, str]) -> RunConfig:
    """Build a RunConfig from raw key=value pairs, rejecting unknown keys."""
    known = set(MODEL_KEYS) | set(TRAIN_KEYS) | set(OTHER_KEYS)
    tasks: List[TaskSpec] = []
    for key, value in values.items():
        if key.startswith("task."):
            name = key[len("task."):]
            if not name or "." in name:
                raise ConfigError(f"malformed task key {key!r}")
            spec = parse_task_spec(name, value)
            if "seed=" not in value:
                spec = dataclasses.replace(spec, seed=len(tasks))
            tasks.append(spec)
        elif key not in known and not key.startswith(ARTIFACT_PREFIX):
            raise ConfigError(f"unknown config key {key!r}")
    try:
        model = ModelConfig(**_dataclass_kwargs(ModelConfig, MODEL_KEYS, values))
        train = TrainConfig(**_dataclass_kwargs(TrainConfig, TRAIN_KEYS, values))
        pretrain = PretrainConfig(**_dataclass_kwargs(
            PretrainConfig, [k.split(".", 1)[1] for k in OTHER_KEYS if k.startswith("pretrain.")],
            values, "pretrain."))
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    data = values.get("data")
    data = None if data in (None, "", "none") else data
    base = values.get("base_checkpoint")
    base = None if base in (None, "", "none") else base
    if data is None and not tasks:
        raise ConfigError("no tasks: declare task.<name> keys or set data")
    if data is not None and tasks:
        raise ConfigError("use either data or task.<name> keys, not both")
    if pretrain.steps < 0:
        raise ConfigError("pretrain.steps must be >= 0")
    return RunConfig(model, train, tasks, data, base, pretrain)


def load(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    values: Dict[str, str] = {}
    if path is not None:
        values.update(parse_lines(Path(path).read_text(), str(path)))
    for text in overrides:
        key, value = parse_override(text)
        values[key] = value
    return resolve(values)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (frozenset, set, list, tuple)):
        return ",".join(sorted(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(run: RunConfig, artifacts: Optional[Dict[str, str]] = None) -> str:
    """Fully resolved configuration in the input format."""
    lines = ["# model"]
    lines += [f"{k} = {_fmt(getattr(run.model, k))}" for k in MODEL_KEYS]
    lines.append("# training")
    lines += [f"{k} = {_fmt(getattr(run.train, k))}" for k in TRAIN_KEYS]
    lines.append("# data and base model")
    lines.append(f"data = {_fmt(run.data)}")
    lines.append(f"base_checkpoint = {_fmt(run.base_checkpoint)}")
    for k in OTHER_KEYS:
        if k.startswith("pretrain."):
            lines.append(f"{k} = {_fmt(getattr(run.pretrain, k.split('.', 1)[1]))}")
    for spec in run.tasks:
        lines.append(f"task.{spec.name} = {render_task_spec(spec)}")
    for k, v in (artifacts or {}).items():
        lines.append(f"{ARTIFACT_PREFIX}{k} = {v}")
    return "\n".join(lines) + "\n"


def describe_keys() -> str:
    keys = documented_keys()
    width = max(len(k) for k in keys)
    return "\n".join(f"  {k.ljust(width)}  {v}" for k, v in keys.items())


def as_json(run: RunConfig) -> str:
    return json.dumps({"model": run.model.to_dict(), "train": dataclasses.asdict(run.train)}, sort_keys=True)
