"""Checkpoint files: a key=value manifest plus a raw float64 blob.

A checkpoint is a directory holding ``manifest.txt`` and ``params.bin``.  The
manifest lists the model configuration, seed, task names and one ``param``
line per parameter (name, shape, owner, trainable flag, owning task); the
blob is every parameter flattened in manifest order as little-endian float64.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .config import ModelConfig
from .transformer import Model, build_model

FORMAT = "hyperformer-checkpoint/1"
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save(model: Model, path, step: Optional[int] = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = model.config.to_dict()
    lines = [f"format={FORMAT}", f"seed={model.seed}", f"eps={model.config.eps!r}",
             f"tasks={json.dumps(model.task_names)}"]
    if step is not None:
        lines.append(f"step={step}")
    for key in sorted(cfg):
        lines.append(f"config.{key}={json.dumps(cfg[key])}")
    chunks = []
    for p in model.params.values():
        shape = ",".join(str(n) for n in p.shape)
        lines.append(f"param={p.name} {shape} {p.owner} {int(p.trainable)} {p.task or '-'}")
        chunks.append(np.ascontiguousarray(p.tensor.data, dtype=_LE_F64).tobytes())
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    (path / "params.bin").write_bytes(b"".join(chunks))
    return path


def read_manifest(path) -> Dict:
    path = Path(path)
    try:
        text = (path / "manifest.txt").read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read manifest in {path}: {exc}") from exc
    meta: Dict = {"config": {}, "params": []}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"manifest line {lineno}: expected key=value")
        if key == "param":
            fields = value.split(" ")
            if len(fields) != 5:
                raise CheckpointError(f"manifest line {lineno}: malformed param record")
            name, shape, owner, trainable, task = fields
            meta["params"].append({
                "name": name,
                "shape": tuple(int(n) for n in shape.split(",")) if shape else (),
                "owner": owner,
                "trainable": trainable == "1",
                "task": None if task == "-" else task,
            })
        elif key.startswith("config."):
            meta["config"][key[len("config."):]] = json.loads(value)
        elif key == "tasks":
            meta["tasks"] = json.loads(value)
        else:
            meta[key] = value
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    return meta


def load(path) -> Model:
    """Rebuild the model recorded in ``path`` with its saved values and flags."""
    path = Path(path)
    meta = read_manifest(path)
    cfg = dict(meta["config"])
    cfg["ablations"] = frozenset(cfg.get("ablations", []))
    model = build_model(ModelConfig(**cfg), meta["tasks"], int(meta["seed"]))
    try:
        blob = (path / "params.bin").read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read parameter blob in {path}: {exc}") from exc
    expected = sum(int(np.prod(p["shape"])) for p in meta["params"]) * 8
    if len(blob) != expected:
        raise CheckpointError(f"parameter blob has {len(blob)} bytes, manifest needs {expected}")
    if [p["name"] for p in meta["params"]] != list(model.params):
        raise CheckpointError("manifest parameters do not match the rebuilt model")
    offset = 0
    for rec in meta["params"]:
        n = int(np.prod(rec["shape"]))
        data = np.frombuffer(blob, dtype=_LE_F64, count=n, offset=offset).astype(np.float64).reshape(rec["shape"])
        offset += n * 8
        p = model.params[rec["name"]]
        if p.shape != data.shape:
            raise CheckpointError(f"{rec['name']}: shape mismatch")
        p.tensor.data = data
        p.owner = rec["owner"]
        p.task = rec["task"]
        p.trainable = rec["trainable"]
        p.tensor.requires_grad = rec["trainable"]
    model.mark_updated()
    return model
