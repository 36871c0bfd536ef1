"""Embedding container, synthetic vectors, similarity math, contrastive loss."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triseg.gradcheck import finite_difference_check
from triseg.tensor import Tensor
from triseg.textbridge import (
    TextEmbeddingSet,
    TextEntry,
    chunk_average,
    contrastive_loss,
    cosine_similarity,
    load_embeddings,
    save_embeddings,
    similarity_matrix,
    synth_embeddings,
)


def _write(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f)


class TestLoader:
    def test_wellformed_file_loads(self, tmp_path, rng):
        payload = {
            "dim": 512,
            "classes": [
                {"name": "organ", "prompt": "A photo of a organ", "branch": 1,
                 "embedding": rng.standard_normal(512).tolist()},
                {"name": "tumor", "prompt": "A photo of a tumor", "branch": 1,
                 "embedding": rng.standard_normal(512).tolist()},
            ],
        }
        path = tmp_path / "e.json"
        _write(path, payload)
        emb = load_embeddings(path)
        assert emb.dim == 512
        assert emb.class_names(1) == ["organ", "tumor"]

    def test_wrong_vector_length_reports_index(self, tmp_path):
        payload = {
            "dim": 512,
            "classes": [
                {"name": "organ", "prompt": "p", "embedding": [0.0] * 512},
                {"name": "tumor", "prompt": "p", "embedding": [0.0] * 511},
            ],
        }
        path = tmp_path / "bad.json"
        _write(path, payload)
        with pytest.raises(ValueError, match="index 1"):
            load_embeddings(path)

    def test_duplicate_names_rejected_per_branch(self, tmp_path):
        vec = [0.5] * 512
        payload = {"dim": 512, "classes": [
            {"name": "organ", "prompt": "p", "branch": 1, "embedding": vec},
            {"name": "organ", "prompt": "q", "branch": 1, "embedding": vec},
        ]}
        path = tmp_path / "dup.json"
        _write(path, payload)
        with pytest.raises(ValueError, match="duplicate"):
            load_embeddings(path)
        # same name across branches is fine
        payload["classes"][1]["branch"] = 2
        _write(path, payload)
        assert load_embeddings(path).class_names(2) == ["organ"]

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ValueError, match="malformed"):
            load_embeddings(path)

    def test_save_load_bit_exact(self, tmp_path, rng):
        emb = synth_embeddings(["a", "b", "c"], seed=5)
        path = tmp_path / "round.json"
        save_embeddings(emb, path)
        back = load_embeddings(path)
        for e1, e2 in zip(emb.entries, back.entries):
            assert np.array_equal(e1.vector, e2.vector)
            assert (e1.class_name, e1.branch, e1.prompt) == (e2.class_name, e2.branch, e2.prompt)

    def test_zero_vector_warns_on_load(self, tmp_path):
        payload = {"dim": 512, "classes": [{"name": "a", "prompt": "p", "embedding": [0.0] * 512}]}
        path = tmp_path / "zero.json"
        _write(path, payload)
        with pytest.warns(UserWarning, match="zero vector"):
            load_embeddings(path)


class TestSynthEmbeddings:
    def test_unit_norm(self):
        emb = synth_embeddings(["x", "y", "z"], seed=0)
        for e in emb.entries:
            assert abs(np.linalg.norm(e.vector) - 1.0) < 1e-6

    def test_deterministic(self):
        a = synth_embeddings(["x", "y"], seed=3)
        b = synth_embeddings(["x", "y"], seed=3)
        for e1, e2 in zip(a.entries, b.entries):
            assert np.array_equal(e1.vector, e2.vector)

    def test_pairwise_separation_k8(self):
        names = [f"c{i}" for i in range(8)]
        emb = synth_embeddings(names, seed=1)
        for branch in (1, 2):
            m = emb.matrix(names, branch)
            cos = m @ m.T - np.eye(8)
            assert np.abs(cos).max() < 0.5

    def test_missing_class_raises(self):
        emb = synth_embeddings(["x"], seed=0)
        with pytest.raises(ValueError, match="missing"):
            emb.matrix(["x", "ghost"], branch=1)


class TestCosine:
    def test_self_similarity_is_one(self, rng):
        v = rng.standard_normal(64)
        assert cosine_similarity(v, v) == pytest.approx(1.0)

    def test_orthogonal_is_zero(self):
        a = np.zeros(8); a[0] = 2.0
        b = np.zeros(8); b[3] = 5.0
        assert cosine_similarity(a, b) == 0.0

    def test_hand_dot_product(self):
        a = np.zeros(16); a[0] = a[1] = 1.0
        b = np.zeros(16); b[0] = 1.0
        assert cosine_similarity(a, b) == pytest.approx(1.0 / math.sqrt(2.0))

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            cosine_similarity(np.zeros(4), np.ones(4))


class TestSimilarityMatrix:
    def test_matching_row_is_max_and_one(self, rng):
        ft = rng.standard_normal((4, 32))
        fv = np.vstack([ft[2], rng.standard_normal(32)])
        s = similarity_matrix(fv, ft).data
        assert s[0, 2] == pytest.approx(1.0, abs=1e-9)
        assert s[0].argmax() == 2

    @settings(deadline=None, max_examples=20)
    @given(seed=st.integers(0, 2**31), b=st.integers(1, 4), k=st.integers(1, 5))
    def test_cauchy_schwarz_bound(self, seed, b, k):
        rng = np.random.default_rng(seed)
        s = similarity_matrix(rng.standard_normal((b, 16)), rng.standard_normal((k, 16))).data
        assert np.abs(s).max() <= 1.0 + 1e-6

    def test_zero_row_rejected(self, rng):
        with pytest.raises(ValueError, match="zero-norm"):
            similarity_matrix(np.zeros((1, 8)), rng.standard_normal((2, 8)))

    def test_gradcheck_through_normalization(self, rng):
        fv = Tensor(rng.standard_normal((2, 6)), requires_grad=True)
        ft = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        probe = Tensor(rng.standard_normal((2, 3)))
        res = finite_difference_check(
            lambda: (similarity_matrix(fv, ft) * probe).sum(), [fv, ft], h=1e-4, samples=8, rng=rng, tol=1e-5
        )
        assert res.passed, res.max_rel_err


class TestContrastiveLoss:
    def test_zero_logits_give_ln2_for_any_labels(self, rng):
        for _ in range(3):
            y = (rng.random((2, 5)) > 0.5) * 1.0
            assert contrastive_loss(np.zeros((2, 5)), y).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_saturated_correct_logits_vanish(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        s = np.where(y == 1, 10.0, -10.0)
        assert contrastive_loss(s, y).item() < 1e-4

    def test_matches_naive_two_pass_oracle(self, rng):
        s = rng.uniform(-5, 5, (3, 4))
        y = (rng.random((3, 4)) > 0.5) * 1.0
        sig = 1.0 / (1.0 + np.exp(-s))
        naive = float(np.mean(-y * np.log(sig) - (1 - y) * np.log(1 - sig)))
        assert contrastive_loss(s, y).item() == pytest.approx(naive, abs=1e-6)

    def test_bounded_logit_consequence(self, rng):
        # cosine-bounded logits pin each element inside [ln(1+1/e), ln(1+e)]
        lo, hi = math.log(1 + math.exp(-1)), math.log(1 + math.exp(1))
        for seed in range(5):
            r = np.random.default_rng(seed)
            s = r.uniform(-1, 1, (3, 4))
            y = (r.random((3, 4)) > 0.5) * 1.0
            val = contrastive_loss(s, y).item()
            assert lo - 1e-12 <= val <= hi + 1e-12

    def test_nonbinary_labels_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            contrastive_loss(np.zeros((1, 2)), np.array([[0.5, 0.0]]))


class TestChunkAverage:
    def test_single_chunk_identity(self, rng):
        v = rng.standard_normal(512)
        assert np.array_equal(chunk_average([v]), v)

    def test_identical_chunks_unchanged(self, rng):
        v = rng.standard_normal(512)
        assert np.allclose(chunk_average([v, v.copy()]), v, atol=1e-15)

    def test_cancellation_flagged_degenerate(self, rng):
        v = rng.standard_normal(512)
        with pytest.warns(UserWarning, match="degenerate"):
            out = chunk_average([v, -v])
        assert np.all(out == 0.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            chunk_average([])
