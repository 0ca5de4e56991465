import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperformer.tasks import (
    END,
    FIRST_CONTENT,
    PAD,
    UNK,
    DatasetFormatError,
    TaskSpec,
    build_registry,
    export_jsonl,
    generate,
    imbalance_profile,
    ingest_jsonl,
    subsample,
    transform,
)


def test_reserved_ids():
    assert (PAD, END, UNK, FIRST_CONTENT) == (0, 1, 2, 3)


@pytest.mark.parametrize("gen,src,expected", [
    ("copy", [3, 7, 2], (3, 7, 2)),
    ("reverse", [3, 7, 2], (2, 7, 3)),
    ("sort", [3, 7, 2], (2, 3, 7)),
])
def test_transform_examples(gen, src, expected):
    assert transform(gen, src, alphabet=10) == expected


def test_shift_wraps_within_alphabet():
    assert transform("shift", [3, 12], alphabet=10, shift=1) == (4, 3)
    assert transform("shift", [5], alphabet=10, shift=2) == (7,)


def test_modsum():
    # content values 4 + 9 + 1 = 14 -> 4
    assert transform("modsum", [7, 12, 4], alphabet=10) == (FIRST_CONTENT + 4,)


def test_unknown_generator():
    with pytest.raises(ValueError):
        transform("rot13", [3], alphabet=10)


def _oracle(gen, src, alphabet, shift):
    vals = [x - FIRST_CONTENT for x in src]
    if gen == "copy":
        out = vals
    elif gen == "reverse":
        out = list(reversed(vals))
    elif gen == "sort":
        out = sorted(vals)
    elif gen == "shift":
        out = [(v + shift) % alphabet for v in vals]
    else:
        out = [sum(vals) % alphabet]
    return tuple(FIRST_CONTENT + v for v in out)


@pytest.mark.parametrize("gen", ["copy", "reverse", "sort", "shift", "modsum"])
def test_generated_targets_agree_with_independent_oracle(gen):
    spec = TaskSpec(gen, gen, alphabet=7, shift=3, n_train=300, n_validation=50, n_test=50, seed=5)
    data = generate(spec)
    for split in data.values():
        for ex in split:
            assert ex.target == _oracle(gen, ex.source, 7, 3)


def test_splits_disjoint_and_sized():
    spec = TaskSpec("c", "copy", n_train=500, n_validation=60, n_test=70, seed=1)
    data = generate(spec)
    assert [len(data[s]) for s in ("train", "validation", "test")] == [500, 60, 70]
    seen = [set(ex.source for ex in data[s]) for s in ("train", "validation", "test")]
    assert not (seen[0] & seen[1]) and not (seen[0] & seen[2]) and not (seen[1] & seen[2])


def test_small_space_skips_disjointness(caplog):
    spec = TaskSpec("c", "copy", alphabet=2, min_len=1, max_len=2, n_train=20, n_validation=5, n_test=5)
    with caplog.at_level("INFO"):
        data = generate(spec)
    assert len(data["train"]) == 20
    assert "too small" in caplog.text


def test_generation_deterministic():
    spec = TaskSpec("c", "reverse", seed=9, n_train=50)
    assert generate(spec) == generate(spec)


def test_alphabet_must_fit_vocab():
    with pytest.raises(ValueError):
        generate(TaskSpec("c", "copy", alphabet=20), vocab=16)


def test_denoise_masks_only():
    spec = TaskSpec("d", "denoise", noise=0.3, n_train=300, n_validation=10, n_test=10)
    masked = total = 0
    for ex in generate(spec)["train"]:
        assert len(ex.source) == len(ex.target)
        for s, t in zip(ex.source, ex.target):
            assert s == t or s == UNK
            masked += s == UNK
            total += 1
    assert 0.2 < masked / total < 0.4


def test_imbalance_profile_proportions():
    specs = [TaskSpec(n, "copy", n_train=4000, n_validation=5, n_test=5, seed=i)
             for i, n in enumerate(["a", "b", "c"])]
    reg = imbalance_profile(specs, sizes=[4000, 400, 400])
    assert np.allclose(reg.proportions(), [10 / 12, 1 / 12, 1 / 12])
    assert np.allclose(imbalance_profile(specs, [10, 10, 10]).proportions(), [1 / 3] * 3)
    assert np.allclose(imbalance_profile(specs[:1], [10]).proportions(), [1.0])


def test_default_imbalance_is_ten_to_one():
    specs = [TaskSpec(n, "copy", n_train=100, n_validation=5, n_test=5) for n in "ab"]
    assert list(imbalance_profile(specs).sizes()) == [100, 10]


class TestSubsample:
    @pytest.fixture
    def reg(self):
        return build_registry([TaskSpec("big", "copy", n_train=10000, n_validation=5, n_test=5),
                               TaskSpec("small", "reverse", n_train=50, n_validation=5, n_test=5, seed=1)])

    def test_count(self, reg):
        sub = subsample(reg.subset(["big"]), 100, seed=0)
        assert len(sub.split("big", "train")) == 100

    def test_deterministic(self, reg):
        assert subsample(reg, 30, 3).datasets == subsample(reg, 30, 3).datasets

    def test_eval_splits_untouched(self, reg):
        sub = subsample(reg, 30, 3)
        for name in reg.names:
            assert sub.split(name, "test") == reg.split(name, "test")
            assert sub.split(name, "validation") == reg.split(name, "validation")

    def test_clamps(self, reg, caplog):
        sub = subsample(reg, 100, 0)
        assert len(sub.split("small", "train")) == 50
        assert "clamping" in caplog.text

    def test_without_replacement(self, reg):
        idx = subsample(reg.subset(["big"]), 500, 1).split("big", "train")
        assert len(set(map(id, idx))) == 500

    def test_rejects_zero(self, reg):
        with pytest.raises(ValueError):
            subsample(reg, 0, 0)


class TestJsonl:
    def write(self, tmp_path, lines):
        path = tmp_path / "data.jsonl"
        path.write_text("\n".join(lines) + "\n")
        return path

    def test_well_formed(self, tmp_path):
        path = self.write(tmp_path, [
            json.dumps({"task": "t", "input": "a b", "target": "b a"}),
            json.dumps({"task": "t", "input": "c", "target": "c", "split": "test"}),
            json.dumps({"task": "u", "input": "a", "target": "z"}),
        ])
        ds = ingest_jsonl(path)
        assert len(ds.examples) == 3
        assert ds.vocab["a"] == 3 and ds.vocab["b"] == 4
        assert ds.examples[0].source == (3, 4) and ds.examples[0].target == (4, 3)
        reg = ds.to_registry()
        assert reg.names == ["t", "u"]
        assert len(reg.split("t", "test")) == 1

    def test_missing_target_names_line(self, tmp_path):
        path = self.write(tmp_path, [
            json.dumps({"task": "t", "input": "a", "target": "a"}),
            json.dumps({"task": "t", "input": "a"}),
        ])
        with pytest.raises(DatasetFormatError, match="line 2"):
            ingest_jsonl(path)

    def test_bad_json(self, tmp_path):
        with pytest.raises(DatasetFormatError, match="line 1"):
            ingest_jsonl(self.write(tmp_path, ["{nope"]))

    def test_unknown_tokens_map_to_unk(self, tmp_path):
        path = self.write(tmp_path, [json.dumps({"task": "t", "input": "a q", "target": "a"})])
        ds = ingest_jsonl(path, vocab={"<pad>": 0, "</s>": 1, "<unk>": 2, "a": 3}, grow=False)
        assert ds.examples[0].source == (3, UNK)

    def test_reingest_identical(self, tmp_path):
        path = self.write(tmp_path, [json.dumps({"task": "t", "input": "x y z", "target": "z"})] * 3)
        a, b = ingest_jsonl(path), ingest_jsonl(path)
        assert a.examples == b.examples and a.vocab == b.vocab

    def test_export_round_trip(self, tmp_path):
        reg = build_registry([TaskSpec("c", "reverse", n_train=20, n_validation=4, n_test=4)])
        vocab = {"<pad>": 0, "</s>": 1, "<unk>": 2, **{f"s{k}": FIRST_CONTENT + k for k in range(10)}}
        export_jsonl(reg, tmp_path / "out.jsonl", vocab)
        back = ingest_jsonl(tmp_path / "out.jsonl", vocab=vocab, grow=False).to_registry()
        assert back.datasets == reg.datasets


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(FIRST_CONTENT, FIRST_CONTENT + 9), min_size=1, max_size=12), st.integers(0, 20))
def test_shift_is_invertible(src, k):
    there = transform("shift", src, alphabet=10, shift=k)
    assert transform("shift", there, alphabet=10, shift=10 - k % 10) == tuple(src)
