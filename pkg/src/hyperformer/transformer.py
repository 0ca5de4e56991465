"""Small pre-norm encoder-decoder transformer with adapter attachment points.

Each block has two attachment points: after the (self-)attention sub-block and
after the feed-forward sub-block.  Decoder cross-attention carries no adapter.
The output projection is the transposed token embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import hypernet
from .autodiff import Tensor
from .config import (
    ADAPTER,
    ADAPTERS,
    ADAPTERS_SHARED_LN,
    BASE,
    BASE_LN,
    FREEZE_BASE_LN,
    FULL_FINETUNE,
    HYPER,
    TASK_FEATURE,
    POSITIONS,
    STACKS,
    USE_TASK_PREFIXES,
    ConfigError,
    ModelConfig,
    Parameter,
)
from .tasks import END, FIRST_CONTENT, PAD, Example


def freeze_policy(cfg: ModelConfig) -> Dict[str, bool]:
    """Trainable flag per owner tag for a variant."""
    if cfg.variant == FULL_FINETUNE:
        return {BASE: True, BASE_LN: True, HYPER: True, TASK_FEATURE: True, ADAPTER: True}
    policy = {BASE: False, BASE_LN: True, HYPER: True, TASK_FEATURE: True, ADAPTER: True}
    if FREEZE_BASE_LN in cfg.ablations:
        policy[BASE_LN] = False
    return policy


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def sinusoidal_positions(n: int, h: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(h)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / h)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class TokenBatch:
    source: np.ndarray          # [B, S] source ids, PAD-padded
    decoder_input: np.ndarray   # [B, T] PAD-started, shifted targets
    target: np.ndarray          # [B, T] targets followed by END, PAD-padded

    def __len__(self) -> int:
        return self.source.shape[0]


def make_batch(examples: Sequence[Example]) -> TokenBatch:
    src_len = max(len(e.source) for e in examples)
    tgt_len = max(len(e.target) for e in examples) + 1
    src = np.full((len(examples), src_len), PAD, dtype=np.int64)
    tgt = np.full((len(examples), tgt_len), PAD, dtype=np.int64)
    for b, e in enumerate(examples):
        src[b, : len(e.source)] = e.source
        tgt[b, : len(e.target)] = e.target
        tgt[b, len(e.target)] = END
    dec = np.full_like(tgt, PAD)
    dec[:, 1:] = tgt[:, :-1]
    return TokenBatch(src, dec, tgt)


class Model:
    """Parameter registry plus the forward computation."""

    def __init__(self, config: ModelConfig, task_names: Sequence[str], seed: int):
        self.config = config
        self.task_names = list(task_names)
        self.seed = seed
        self.params: Dict[str, Parameter] = {}
        self.version = 0
        self.cache = hypernet.WeightCache()
        self.use_cache = True
        self.adapters_enabled = True
        self.record_attention = False
        self.attention_maps: List[np.ndarray] = []
        self._positions = sinusoidal_positions(config.max_len, config.hidden)

    # -- registry ---------------------------------------------------------

    def register(self, param: Parameter) -> None:
        if param.name in self.params:
            raise ValueError(f"duplicate parameter name {param.name}")
        self.params[param.name] = param

    def P(self, name: str) -> Tensor:
        return self.params[name].tensor

    def parameters(self, trainable: Optional[bool] = None, owner: Optional[str] = None) -> List[Parameter]:
        return [p for p in self.params.values()
                if (trainable is None or p.trainable == trainable) and (owner is None or p.owner == owner)]

    def apply_freeze_policy(self, policy: Optional[Dict[str, bool]] = None) -> None:
        policy = policy or freeze_policy(self.config)
        for p in self.params.values():
            p.trainable = policy[p.owner]
            p.tensor.requires_grad = p.trainable

    def set_trainable(self, names: Iterable[str], flag: bool) -> None:
        for n in names:
            self.params[n].trainable = flag
            self.params[n].tensor.requires_grad = flag

    def mark_updated(self) -> None:
        """Record that parameter values changed; generated weights are stale."""
        self.version += 1

    def set_value(self, name: str, value) -> None:
        p = self.params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != p.shape:
            raise ValueError(f"{name}: expected shape {p.shape}, got {value.shape}")
        p.tensor.data = value.copy()
        self.mark_updated()

    def state(self) -> Dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self.params.items()}

    def task_index(self, task: str) -> int:
        try:
            return self.task_names.index(task)
        except ValueError:
            raise KeyError(f"unknown task {task!r}") from None

    # -- conditioning ------------------------------------------------------

    def base_ln(self, name: str, task: str) -> Tuple[Tensor, Tensor]:
        suffix = f"@{task}" if self.config.variant == ADAPTERS else ""
        return self.P(f"{name}.gamma{suffix}"), self.P(f"{name}.beta{suffix}")

    def adapter_weights(self, task: str, stack: str, layer: int, position: int) -> hypernet.GeneratedWeights:
        cfg = self.config
        if cfg.is_hyper:
            def build():
                return hypernet.generate_weights(self.P, cfg, task, stack, layer, position)
            if not self.use_cache:
                return build()
            key = (task, stack, layer, position, ad.is_grad_enabled())
            return self.cache.get(key, self.version, build)
        base = f"adapter.{stack}.{layer}.{position}"
        ln = f"{base}.ln.{{}}@{task}" if cfg.variant == ADAPTERS else f"{base}.ln.{{}}"
        return hypernet.GeneratedWeights(
            self.P(f"{base}.up@{task}"), self.P(f"{base}.down@{task}"),
            self.P(ln.format("gamma")), self.P(ln.format("beta")))

    def _adapt(self, y: Tensor, task: str, stack: str, layer: int, position: int) -> Tensor:
        if not (self.config.has_adapters and self.adapters_enabled):
            return y
        w = self.adapter_weights(task, stack, layer, position)
        return hypernet.adapter_forward(y, w, self.config.eps)

    # -- layers ------------------------------------------------------------

    def _ln(self, x: Tensor, name: str, task: str) -> Tensor:
        g, b = self.base_ln(name, task)
        return ad.layer_norm(x, g, b, self.config.eps)

    def _attention(self, xq: Tensor, xkv: Tensor, prefix: str, mask: np.ndarray) -> Tensor:
        cfg = self.config
        B, Sq, h = xq.shape
        Sk = xkv.shape[1]
        H, dh = cfg.heads, cfg.head_dim
        q = ad.transpose(ad.reshape(ad.linear(xq, self.P(f"{prefix}.q")), (B, Sq, H, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(ad.linear(xkv, self.P(f"{prefix}.k")), (B, Sk, H, dh)), (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(ad.linear(xkv, self.P(f"{prefix}.v")), (B, Sk, H, dh)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dh))
        probs = ad.softmax(scores, mask)
        if self.record_attention:
            self.attention_maps.append(probs.data.copy())
        out = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, Sq, h))
        return ad.linear(out, self.P(f"{prefix}.o"))

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        return ad.linear(ad.gelu(ad.linear(x, self.P(f"{prefix}.in"))), self.P(f"{prefix}.out"))

    def _embed(self, ids: np.ndarray) -> Tensor:
        cfg = self.config
        S = ids.shape[1]
        if S > cfg.max_len:
            raise ValueError(f"sequence length {S} exceeds max_len {cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
        x = ad.take(self.P("embed"), ids)
        return ad.add(x, Tensor(np.broadcast_to(self._positions[:S], x.shape)))

    def prefixed(self, source: np.ndarray, task: str) -> np.ndarray:
        if USE_TASK_PREFIXES not in self.config.ablations:
            return source
        sentinel = self.config.vocab - 1 - self.task_index(task)
        col = np.full((source.shape[0], 1), sentinel, dtype=source.dtype)
        return np.concatenate([col, source], axis=1)

    def encode(self, source: np.ndarray, task: str) -> Tuple[Tensor, np.ndarray]:
        self.task_index(task)
        source = self.prefixed(np.asarray(source, dtype=np.int64), task)
        keys = source != PAD
        mask = keys[:, None, None, :]
        x = self._embed(source)
        for i in range(self.config.layers):
            p = f"enc.{i}"
            a = self._self_attention(x, p, task, mask)
            x = ad.add(x, self._adapt(a, task, "enc", i, 0))
            f = self._ffn(self._ln(x, f"{p}.ln_ffn", task), f"{p}.ffn")
            x = ad.add(x, self._adapt(f, task, "enc", i, 1))
        return self._ln(x, "enc.final_ln", task), keys

    def _self_attention(self, x: Tensor, prefix: str, task: str, mask: np.ndarray) -> Tensor:
        y = self._ln(x, f"{prefix}.ln_attn", task)
        return self._attention(y, y, f"{prefix}.attn", mask)

    def decode(self, memory: Tensor, keys: np.ndarray, decoder_input: np.ndarray, task: str) -> Tensor:
        T = decoder_input.shape[1]
        causal = np.tril(np.ones((T, T), dtype=bool))[None, None]
        cross = keys[:, None, None, :]
        x = self._embed(np.asarray(decoder_input, dtype=np.int64))
        for i in range(self.config.layers):
            p = f"dec.{i}"
            a = self._self_attention(x, p, task, causal)
            x = ad.add(x, self._adapt(a, task, "dec", i, 0))
            c = self._attention(self._ln(x, f"{p}.ln_cross", task), memory, f"{p}.cross", cross)
            x = ad.add(x, c)
            f = self._ffn(self._ln(x, f"{p}.ln_ffn", task), f"{p}.ffn")
            x = ad.add(x, self._adapt(f, task, "dec", i, 1))
        x = ad.scale(self._ln(x, "dec.final_ln", task), self.config.hidden ** -0.5)
        return ad.linear(x, ad.transpose(self.P("embed"), (1, 0)))

    def forward(self, batch: TokenBatch, task: str) -> Tensor:
        """Logits of shape [batch, target_len, vocab]."""
        memory, keys = self.encode(batch.source, task)
        return self.decode(memory, keys, batch.decoder_input, task)

    def loss(self, batch: TokenBatch, task: str) -> Tensor:
        logits = self.forward(batch, task)
        B, T, V = logits.shape
        return ad.softmax_cross_entropy(ad.reshape(logits, (B * T, V)), batch.target.reshape(-1), PAD)

    def decode_greedy(self, sources: Sequence[Sequence[int]], task: str, max_steps: int) -> List[List[int]]:
        """Argmax decoding; each output stops after END or ``max_steps`` tokens."""
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not len(sources):
            return []
        S = max(len(s) for s in sources)
        src = np.full((len(sources), S), PAD, dtype=np.int64)
        for b, s in enumerate(sources):
            src[b, : len(s)] = s
        with ad.no_grad():
            memory, keys = self.encode(src, task)
            dec = np.full((len(sources), 1), PAD, dtype=np.int64)
            done = np.zeros(len(sources), dtype=bool)
            for _ in range(max_steps):
                logits = self.decode(memory, keys, dec, task)
                nxt = logits.data[:, -1, :].argmax(axis=-1)
                nxt = np.where(done, PAD, nxt)
                dec = np.concatenate([dec, nxt[:, None]], axis=1)
                done |= nxt == END
                if done.all():
                    break
        out = []
        for row in dec[:, 1:]:
            toks = []
            for t in row:
                if t == PAD:
                    break
                toks.append(int(t))
                if t == END:
                    break
            out.append(toks)
        return out


def strip_end(tokens: Sequence[int]) -> Tuple[int, ...]:
    toks = list(tokens)
    if END in toks:
        toks = toks[: toks.index(END)]
    return tuple(toks)


# ---------------------------------------------------------------------------
# construction


def _base_parameters(cfg: ModelConfig, rng: np.random.Generator) -> List[Tuple[str, np.ndarray, str]]:
    h, f, std = cfg.hidden, cfg.d_ff, cfg.base_init_std
    out = [("embed", _truncated_normal(rng, (cfg.vocab, h), cfg.embed_init_std), BASE)]

    def ln(name):
        out.append((f"{name}.gamma", np.ones(h), BASE_LN))
        out.append((f"{name}.beta", np.zeros(h), BASE_LN))

    def attn(name):
        for m in "qkvo":
            out.append((f"{name}.{m}", _truncated_normal(rng, (h, h), std), BASE))

    for s in STACKS:
        for i in range(cfg.layers):
            p = f"{s}.{i}"
            ln(f"{p}.ln_attn")
            attn(f"{p}.attn")
            if s == "dec":
                ln(f"{p}.ln_cross")
                attn(f"{p}.cross")
            ln(f"{p}.ln_ffn")
            out.append((f"{p}.ffn.in", _truncated_normal(rng, (h, f), std), BASE))
            out.append((f"{p}.ffn.out", _truncated_normal(rng, (f, h), std), BASE))
        ln(f"{s}.final_ln")
    return out


def build_model(config: ModelConfig, tasks, seed: int) -> Model:
    """Deterministically initialised model for the given task names.

    Base weights come from their own seed stream, so every variant built with
    the same seed shares identical base parameters.
    """
    names = list(tasks.names if hasattr(tasks, "names") else tasks)
    if not names:
        raise ConfigError("at least one task is required")
    if len(set(names)) != len(names):
        raise ConfigError("task names must be unique")
    if USE_TASK_PREFIXES in config.ablations and config.vocab - len(names) < FIRST_CONTENT + 1:
        raise ConfigError("vocabulary too small to reserve task prefix tokens")
    model = Model(config, names, seed)
    base_rng = np.random.default_rng([seed, 0])
    extra_rng = np.random.default_rng([seed, 1])

    for name, data, owner in _base_parameters(config, base_rng):
        if owner == BASE_LN and config.variant == ADAPTERS:
            stem, leaf = name.rsplit(".", 1)
            for task in names:
                model.register(Parameter(f"{stem}.{leaf}@{task}", Tensor(data.copy()), owner, True, task))
        else:
            model.register(Parameter(name, Tensor(data), owner))

    if config.variant in (ADAPTERS, ADAPTERS_SHARED_LN):
        h, d = config.hidden, config.adapter_dim
        per_task_ln = config.variant == ADAPTERS
        for s in STACKS:
            for i in range(config.layers):
                for j in POSITIONS:
                    base = f"adapter.{s}.{i}.{j}"
                    for task in names:
                        model.register(Parameter(f"{base}.up@{task}",
                                                 Tensor(_truncated_normal(extra_rng, (h, d), config.base_init_std)),
                                                 ADAPTER, True, task))
                        model.register(Parameter(f"{base}.down@{task}",
                                                 Tensor(_truncated_normal(extra_rng, (d, h), config.base_init_std)),
                                                 ADAPTER, True, task))
                    ln_tasks = names if per_task_ln else [None]
                    for task in ln_tasks:
                        suffix = f"@{task}" if task else ""
                        gamma = extra_rng.normal(0.0, config.head_init_std, size=h)
                        model.register(Parameter(f"{base}.ln.gamma{suffix}", Tensor(gamma), ADAPTER, True, task))
                        model.register(Parameter(f"{base}.ln.beta{suffix}", Tensor(np.zeros(h)), ADAPTER, True, task))
    elif config.is_hyper and config.has_adapters:
        for p in hypernet.hyper_parameters(config, names, extra_rng):
            model.register(p)

    model.apply_freeze_policy()
    return model


def load_base_weights(model: Model, source: Model) -> Model:
    """Copy base weights and base layer norms from ``source`` into ``model``.

    ``source`` is usually a pretrained full fine-tuning model of the same
    dimensions.  Per-task layer-norm copies receive the shared value.
    Trainability flags of ``model`` are left alone.
    """
    a, b = model.config, source.config
    dims = ("layers", "hidden", "heads", "d_ff", "vocab", "max_len")
    if any(getattr(a, k) != getattr(b, k) for k in dims):
        raise ConfigError("base model dimensions differ: " + ", ".join(
            f"{k} {getattr(b, k)}->{getattr(a, k)}" for k in dims if getattr(a, k) != getattr(b, k)))
    values = {}
    for p in source.params.values():
        if p.owner in (BASE, BASE_LN):
            values[p.name.split("@")[0]] = p.tensor.data
    for p in model.params.values():
        if p.owner in (BASE, BASE_LN):
            key = p.name.split("@")[0]
            if key not in values:
                raise ConfigError(f"source model has no value for {key}")
            p.tensor.data = values[key].copy()
    model.mark_updated()
    return model
