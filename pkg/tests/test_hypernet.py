import csv
import math

import numpy as np
import pytest

from hyperformer import autodiff as ad
from hyperformer import hypernet
from hyperformer.autodiff import Tensor
from hyperformer.config import HYPER, TASK_FEATURE, ModelConfig
from hyperformer.tasks import Example
from hyperformer.transformer import build_model, make_batch

from conftest import numerical_grad, rel_err


def cfg(**kw):
    base = dict(layers=2, hidden=8, heads=2, d_ff=16, vocab=32, adapter_dim=2, task_dim=4, projector_hidden=8,
                feature_dim=6, variant="hyperformer++")
    base.update(kw)
    return ModelConfig(**base)


def model(**kw):
    return build_model(cfg(**kw), ["a", "b"], 0)


def batch(rng, B=2, S=4, T=3, vocab=32):
    return make_batch([Example(tuple(rng.integers(3, vocab, S)), tuple(rng.integers(3, vocab, T)), "a")
                       for _ in range(B)])


class TestHeads:
    @pytest.mark.parametrize("variant", ["hyperformer", "hyperformer++"])
    def test_linear_in_embedding(self, rng, variant):
        m = model(variant=variant, head_init_std=0.5)
        head = hypernet.head_name(m.config, "dec", 1, 0)
        I1, I2 = rng.normal(size=4), rng.normal(size=4)
        a, b = 1.7, -0.3

        def gen(I):
            up, down = hypernet.generate_adapter(m.P, m.config, head, Tensor(I))
            g, be = hypernet.generate_layernorm(m.P, head, Tensor(I))
            return [up.data, down.data, g.data, be.data]

        for mixed, x, y in zip(gen(a * I1 + b * I2), gen(I1), gen(I2)):
            assert np.allclose(mixed, a * x + b * y, atol=1e-12, rtol=0)

    def test_scaling(self, rng):
        m = model(head_init_std=0.5)
        I = rng.normal(size=4)
        up1, _ = hypernet.generate_adapter(m.P, m.config, "hyper.enc", Tensor(I))
        up2, _ = hypernet.generate_adapter(m.P, m.config, "hyper.enc", Tensor(2 * I))
        assert np.allclose(up2.data, 2 * up1.data, atol=1e-15)

    def test_zero_embedding(self):
        m = model(head_init_std=0.5)
        zero = Tensor(np.zeros(4))
        up, down = hypernet.generate_adapter(m.P, m.config, "hyper.enc", zero)
        g, b = hypernet.generate_layernorm(m.P, "hyper.enc", zero)
        assert not up.data.any() and not down.data.any()
        assert not g.data.any() and not b.data.any()
        x = np.random.default_rng(0).normal(size=(3, 8))
        out = ad.layer_norm(Tensor(x), g, b)
        assert not out.data.any()

    def test_head_sizes(self):
        m = model(task_dim=64, projector_hidden=128)
        assert m.P("hyper.enc.up").data.size == 2 * 8 * 64 == 1024
        assert m.P("hyper.enc.gamma").data.size + m.P("hyper.enc.beta").data.size == 1024

    def test_shared_variant_has_one_head_set_per_stack(self):
        for L in (1, 3, 5):
            names = [n for n in model(layers=L).params if n.endswith(".up")]
            assert names == ["hyper.enc.up", "hyper.dec.up"]


class TestProjector:
    def test_zero_chain(self):
        m = model(variant="hyperformer")
        for s in ("enc", "dec"):
            for w in ("w1", "w2"):
                m.set_value(f"hyper.{s}.proj.{w}", np.zeros_like(m.P(f"hyper.{s}.proj.{w}").data))
        I = hypernet.project_task(m.P, m.config, "enc", Tensor(np.zeros(6)))
        assert I.shape == (4,) and not I.data.any()

    def test_perturbing_z_changes_embedding(self, rng):
        m = model(variant="hyperformer")
        z = rng.normal(size=6)
        I1 = hypernet.project_task(m.P, m.config, "enc", Tensor(z)).data
        z[2] += 0.5
        I2 = hypernet.project_task(m.P, m.config, "enc", Tensor(z)).data
        assert not np.allclose(I1, I2)

    def test_wide_feature_config_builds(self):
        m = build_model(cfg(variant="hyperformer", feature_dim=512, task_dim=64, projector_hidden=128), ["a"], 0)
        assert m.P("task.a.z").shape == (512,)
        assert hypernet.task_only_embedding(m.P, m.config, "a").shape == (64,)

    def test_no_projector_is_identity(self, rng):
        m = build_model(cfg(variant="hyperformer", feature_dim=4, ablations={"no-task-projector"}), ["a"], 0)
        z = rng.normal(size=4)
        assert np.array_equal(hypernet.project_task(m.P, m.config, "enc", Tensor(z)).data, z)
        with pytest.raises(ValueError):
            hypernet.project_task(m.P, m.config, "enc", Tensor(np.zeros(5)))
        assert not any(".proj." in n for n in m.params)


class TestSharedProjector:
    def test_positions_and_layers_distinguished(self):
        m = model()
        z = m.P("task.a.z")
        I = {(i, j): hypernet.project_task_shared(m.P, m.config, "enc", z, i, j).data
             for i in range(2) for j in range(2)}
        keys = list(I)
        for u in range(len(keys)):
            for v in range(u + 1, len(keys)):
                assert not np.allclose(I[keys[u]], I[keys[v]])

    def test_mlp_size(self):
        m = model(task_dim=64, projector_hidden=128)
        n = m.P("hyper.enc.proj.w1").data.size + m.P("hyper.enc.proj.w2").data.size
        assert n == 4 * 64 * 128 == 32768

    def test_zero_inputs_give_shared_ln_beta(self, rng):
        m = model()
        for w in ("w1", "w2"):
            m.set_value(f"hyper.enc.proj.{w}", np.zeros_like(m.P(f"hyper.enc.proj.{w}").data))
        beta = rng.normal(size=4)
        m.set_value("hyper.enc.proj_ln.beta", beta)
        zero = Tensor(np.zeros(4))
        I = hypernet.project_task_shared(m.P, m.config, "enc", zero, 0, 0, layer_emb=zero, pos_emb=zero)
        assert np.allclose(I.data, beta, atol=1e-15)

    def test_range_checked(self):
        m = model()
        with pytest.raises(IndexError):
            hypernet.project_task_shared(m.P, m.config, "enc", m.P("task.a.z"), 2, 0)
        with pytest.raises(IndexError):
            hypernet.project_task_shared(m.P, m.config, "enc", m.P("task.a.z"), 0, 2)


class TestAdapterForward:
    def weights(self, rng, **zero):
        shapes = dict(up=(8, 2), down=(2, 8), gamma=(8,), beta=(8,))
        arrs = {k: np.zeros(s) if k in zero else rng.normal(size=s) for k, s in shapes.items()}
        return arrs, hypernet.GeneratedWeights(*(Tensor(arrs[k]) for k in ("up", "down", "gamma", "beta")))

    def test_identity_when_up_and_beta_zero(self, rng):
        _, w = self.weights(rng, up=1, beta=1)
        x = rng.normal(size=(3, 8))
        assert np.array_equal(hypernet.adapter_forward(Tensor(x), w).data, x)

    def test_zero_down_adds_beta(self, rng):
        arrs, w = self.weights(rng, down=1)
        x = rng.normal(size=(2, 3, 8))
        assert np.allclose(hypernet.adapter_forward(Tensor(x), w).data, x + arrs["beta"], atol=1e-15)

    def test_matches_straight_line_oracle(self, rng):
        arrs, w = self.weights(rng)
        x = rng.normal(size=(4, 8))
        expected = np.zeros_like(x)
        for r in range(4):
            a = x[r] @ arrs["down"].T
            g = np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in a])
            u = g @ arrs["up"].T
            mu = sum(u) / 8
            var = sum((v - mu) ** 2 for v in u) / 8
            expected[r] = arrs["gamma"] * (u - mu) / math.sqrt(var + 1e-6) + arrs["beta"] + x[r]
        assert np.abs(hypernet.adapter_forward(Tensor(x), w).data - expected).max() < 1e-12


class TestParameters:
    def test_shared_counts_constant_in_layers_and_tasks(self):
        counts = {}
        for L in (2, 4):
            for T in (2, 8):
                m = build_model(cfg(layers=L), [f"t{k}" for k in range(T)], 0)
                hyper = sum(p.size for p in m.parameters(owner=HYPER))
                feat = sum(p.size for p in m.parameters(owner=TASK_FEATURE))
                counts[L, T] = (hyper, feat)
        assert len({h for h, _ in counts.values()}) == 1
        assert counts[2, 8][1] > counts[2, 2][1] and counts[4, 2][1] > counts[2, 2][1]

    def test_feature_count(self):
        # t(T + 4 + 2L) with t=4, T=2, L=2
        m = model()
        assert sum(p.size for p in m.parameters(owner=TASK_FEATURE)) == 4 * (2 + 4 + 4)

    def test_unconditional_layer_norm(self):
        m = model(ablations={"no-conditional-ln"})
        assert m.params["adapter.enc.0.1.ln.gamma"].owner == HYPER
        assert "hyper.enc.gamma" not in m.params
        w = m.adapter_weights("a", "enc", 0, 1)
        assert w.gamma is m.P("adapter.enc.0.1.ln.gamma")


class TestGradients:
    def test_embedding_gradients(self, rng):
        m = model(head_init_std=0.5, base_init_std=0.5, vocab=12)
        m.use_cache = False
        b = batch(rng, vocab=12)
        m.loss(b, "a").backward()

        def f():
            with ad.no_grad():
                return m.loss(b, "a").item()

        for name in ("task.a.z", "hyper.enc.layer_emb.1", "hyper.dec.pos_emb.0"):
            g = m.P(name).grad
            assert g is not None and np.abs(g).max() > 0
            assert rel_err(g, numerical_grad(f, m.P(name).data)) < 1e-4
        assert m.P("task.b.z").grad is None


def test_representability_by_per_layer_heads(rng):
    """One-hot task features and an identity projector reproduce given adapters exactly."""
    T, h, d, L = 3, 8, 2, 2
    tasks = [f"t{k}" for k in range(T)]
    common = dict(layers=L, hidden=h, heads=2, d_ff=16, vocab=32, adapter_dim=d)
    target = build_model(ModelConfig(**common, variant="adapters-shared-ln", head_init_std=0.5), tasks, 0)
    for p in target.parameters(owner="adapter"):
        p.tensor.data = rng.normal(size=p.shape)
    t = T + 1
    hyper = build_model(ModelConfig(**common, variant="hyperformer", task_dim=t, feature_dim=t,
                                    ablations={"no-task-projector"}), tasks, 0)
    Z = np.eye(t)[:T]
    for k, task in enumerate(tasks):
        hyper.set_value(f"task.{task}.z", Z[k])
    for s in ("enc", "dec"):
        for i in range(L):
            for j in (0, 1):
                head = f"hyper.{s}.{i}.{j}"
                base = f"adapter.{s}.{i}.{j}"
                fits = {
                    "up": [target.P(f"{base}.up@{task}").data.reshape(-1) for task in tasks],
                    "down": [target.P(f"{base}.down@{task}").data.reshape(-1) for task in tasks],
                    "gamma": [target.P(f"{base}.ln.gamma").data] * T,
                    "beta": [target.P(f"{base}.ln.beta").data] * T,
                }
                for part, rows in fits.items():
                    W, *_ = np.linalg.lstsq(Z, np.stack(rows), rcond=None)
                    hyper.set_value(f"{head}.{part}", W)
    b = batch(rng)
    for task in tasks:
        assert np.abs(hyper.forward(b, task).data - target.forward(b, task).data).max() < 1e-10


class TestExport:
    @pytest.mark.parametrize("variant", ["hyperformer", "hyperformer++"])
    def test_rows_and_columns(self, tmp_path, variant):
        m = build_model(cfg(variant=variant), ["a", "b", "c"], 0)
        path = tmp_path / "e.csv"
        hypernet.export_task_embeddings(m.P, m.config, m.task_names, path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["task"] + [f"dim{k}" for k in range(4)]
        assert [r[0] for r in rows[1:]] == ["a", "b", "c"]
        assert all(len(r) == 5 for r in rows)
        first = path.read_bytes()
        hypernet.export_task_embeddings(m.P, m.config, m.task_names, path)
        assert path.read_bytes() == first

    def test_shared_variant_uses_zero_structure(self):
        m = model()
        zero = Tensor(np.zeros(4))
        expected = hypernet.project_task_shared(m.P, m.config, "enc", m.P("task.b.z"), 0, 0,
                                                layer_emb=zero, pos_emb=zero).data
        assert np.array_equal(hypernet.task_only_embedding(m.P, m.config, "b"), expected)

    def test_no_embeddings_for_full_finetune(self):
        m = build_model(cfg(variant="full-finetune"), ["a"], 0)
        with pytest.raises(ValueError):
            hypernet.task_only_embedding(m.P, m.config, "a")


class TestWeightCache:
    def test_version_must_not_decrease(self):
        c = hypernet.WeightCache()
        c.get("k", 3, lambda: 1)
        with pytest.raises(AssertionError):
            c.get("k", 2, lambda: 1)

    def test_memoises(self):
        c = hypernet.WeightCache()
        calls = []
        for _ in range(3):
            c.get("k", 1, lambda: calls.append(1) or "w")
        assert calls == [1] and c.hits == 2
        c.get("k", 2, lambda: calls.append(1) or "w")
        assert len(calls) == 2
