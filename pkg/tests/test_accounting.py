import csv
import io
import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyperformer import accounting as acc
from hyperformer.config import ModelConfig
from hyperformer.transformer import build_model


def build(variant, T=2, L=2, h=8, d=2, t=4, e=8, **kw):
    cfg = ModelConfig(layers=L, hidden=h, heads=2, d_ff=16, vocab=16, adapter_dim=d, task_dim=t,
                      projector_hidden=e, variant=variant, **kw)
    return build_model(cfg, [f"t{k}" for k in range(T)], 0)


class TestFormulas:
    def test_adapters(self):
        assert acc.formula_adapters(2, 2, 8, 2) == 768
        assert acc.formula_adapters(8, 12, 768, 24) == 14_745_600
        assert acc.formula_adapters(1, 1, 1, 1) == 16

    def test_shared_hypernetwork(self):
        assert acc.formula_hyperformer_pp(2, 2, 8, 2, 4, 8) == 40 + 256 + 384 == 680
        assert acc.formula_hyperformer_pp(8, 12, 768, 24, 64, 128) == 2304 + 65_536 + 4_915_200 == 4_983_040
        assert acc.formula_hyperformer_pp(8, 12, 768, 24, 0, 128) == 0

    def test_t5_base_scale_constant(self):
        s = acc.T5_BASE_SCALE
        assert acc.formula_hyperformer_pp(**s) == 4_983_040
        assert acc.formula_adapters(s["T"], s["L"], s["h"], s["d"]) == 14_745_600

    def test_shared_cheaper_per_task_at_base_scale(self):
        s = acc.T5_BASE_SCALE
        assert acc.formula_hyperformer_pp(**s) / s["T"] < acc.formula_adapters(s["T"], s["L"], s["h"], s["d"]) / s["T"]

    def test_crossover(self):
        for dims in [(2, 8, 2, 4, 8), (12, 768, 24, 64, 128), (1, 4, 1, 2, 4)]:
            T = acc.crossover_tasks(*dims)
            L, h, d, t, e = dims
            assert acc.formula_hyperformer_pp(T, L, h, d, t, e) < acc.formula_adapters(T, L, h, d)
            if T > 1:
                assert acc.formula_hyperformer_pp(T - 1, L, h, d, t, e) >= acc.formula_adapters(T - 1, L, h, d)

    def test_no_crossover_when_embeddings_cost_more(self):
        assert acc.crossover_tasks(1, 1, 1, 100, 1) is None


@given(st.integers(1, 20), st.integers(1, 12), st.integers(1, 64), st.integers(1, 16))
def test_adapters_strictly_increasing(T, L, h, d):
    assert acc.formula_adapters(T + 1, L, h, d) > acc.formula_adapters(T, L, h, d)
    assert acc.formula_adapters(T, L + 1, h, d) > acc.formula_adapters(T, L, h, d)


class TestEnumeration:
    def test_adapters_exact(self):
        b = acc.enumerate_budget(build("adapters"))
        assert b.owners["adapter"] == 768

    def test_shared_within_slack(self):
        m = build("hyperformer++")
        got, formula, slack = acc.check_against_formula(m)
        assert formula == 680 and slack == 16 and got - formula == 16

    def test_full_finetune(self):
        b = acc.enumerate_budget(build("full-finetune"))
        assert b.trainable == b.total
        assert b.conditioning == 0

    def test_total_is_owner_sum(self):
        for v in ("adapters", "adapters-shared-ln", "hyperformer", "hyperformer++"):
            b = acc.enumerate_budget(build(v))
            assert b.total == sum(b.owners.values())
            assert b.per_task_trainable >= 0

    def test_per_task_divides_shared_evenly(self):
        b = acc.enumerate_budget(build("hyperformer++", T=4))
        assert b.per_task_trainable == b.trainable / 4

    @pytest.mark.parametrize("T,L,h,d,t,e", list(itertools.product((1, 2, 4), (1, 2, 3), (4, 8), (1, 2), (2, 4),
                                                                      (4, 8))))
    def test_grid(self, T, L, h, d, t, e):
        a = acc.enumerate_budget(build("adapters", T, L, h, d, t, e))
        assert a.owners["adapter"] == acc.formula_adapters(T, L, h, d)
        p = acc.enumerate_budget(build("hyperformer++", T, L, h, d, t, e))
        assert 0 <= p.conditioning - acc.formula_hyperformer_pp(T, L, h, d, t, e) <= 4 * t

    def test_other_variants_match_their_forms(self):
        for v in ("adapters-shared-ln", "hyperformer"):
            got, formula, _ = acc.check_against_formula(build(v))
            assert got == formula

    def test_mismatch_raises(self):
        m = build("adapters")
        m.params.pop(next(n for n in m.params if n.startswith("adapter.")))
        with pytest.raises(ValueError):
            acc.check_against_formula(m)

    def test_ablations_have_no_formula(self):
        assert acc.check_against_formula(build("hyperformer++", ablations={"no-adapters"})) is None


class TestReport:
    def budgets(self):
        return [acc.enumerate_budget(build(v)) for v in ("adapters", "hyperformer++")]

    def test_table_rows(self):
        lines = acc.report(self.budgets()).strip().splitlines()
        assert len(lines) == 3
        assert lines[0].split()[0] == "variant"

    def test_csv_round_trip(self):
        bs = self.budgets()
        rows = list(csv.DictReader(io.StringIO(acc.report(bs, "csv"))))
        assert [r["variant"] for r in rows] == ["adapters", "hyperformer++"]
        for r, b in zip(rows, bs):
            assert int(r["total"]) == b.total and int(r["trainable"]) == b.trainable
            assert int(r["adapter"]) == b.owners["adapter"]

    def test_deterministic(self):
        assert acc.report(self.budgets(), "csv") == acc.report(self.budgets(), "csv")

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            acc.report(self.budgets(), "xml")
