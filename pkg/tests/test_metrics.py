"""Loss oracles and evaluation metrics, including the brute-force NSD oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triseg.gradcheck import finite_difference_check
from triseg.metrics import (
    LossWeights,
    SurfaceSpec,
    bce_loss,
    dice_loss,
    dice_metric,
    nsd_metric,
    per_class_metrics,
    surface_voxels,
    total_loss,
)
from triseg.tensor import Tensor


def nsd_loop_oracle(p, g, spacing, tau):
    """Independent all-python NSD: nested loops, no vectorization shared with
    the implementation."""
    def surface(m):
        pts = []
        d, h, w = m.shape
        for i in range(d):
            for j in range(h):
                for k in range(w):
                    if not m[i, j, k]:
                        continue
                    for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                        ii, jj, kk = i + di, j + dj, k + dk
                        if not (0 <= ii < d and 0 <= jj < h and 0 <= kk < w) or not m[ii, jj, kk]:
                            pts.append((i * spacing[0], j * spacing[1], k * spacing[2]))
                            break
        return pts

    sp, sg = surface(p.astype(bool)), surface(g.astype(bool))
    if not sp and not sg:
        return 1.0
    if not sp or not sg:
        return 0.0
    hits = sum(1 for a in sp if min(math.dist(a, b) for b in sg) <= tau)
    hits += sum(1 for b in sg if min(math.dist(b, a) for a in sp) <= tau)
    return hits / (len(sp) + len(sg))


def _cube(size=12, lo=3, hi=8):
    m = np.zeros((size, size, size))
    m[lo:hi, lo:hi, lo:hi] = 1.0
    return m


class TestDiceLoss:
    def test_saturated_match_is_near_zero(self):
        t = np.zeros((1, 1, 4, 4, 4))
        t[0, 0, :2] = 1.0
        logits = np.where(t == 1, 10.0, -10.0)
        assert dice_loss(logits, t).item() < 1e-3

    def test_empty_empty_smoothed_to_zero(self):
        assert dice_loss(np.full((1, 1, 4, 4, 4), -40.0), np.zeros((1, 1, 4, 4, 4))).item() < 1e-3

    def test_half_overlap_hand_count(self):
        # pred covers voxels {1,2}, target {0,1}: soft dice ~ 2*1/(2+2)
        t = np.zeros((1, 1, 1, 1, 4))
        t[0, 0, 0, 0, :2] = 1.0
        logits = np.full((1, 1, 1, 1, 4), -500.0)
        logits[0, 0, 0, 0, 1:3] = 500.0
        assert dice_loss(logits, t).item() == pytest.approx(0.5, abs=1e-5)

    def test_range_and_saturation_limit(self, rng):
        t = (rng.random((1, 2, 6, 6, 6)) > 0.5) * 1.0
        pred = np.where(t == 1, 20.0, -20.0)
        loss = dice_loss(pred, t).item()
        hard = np.mean([1 - dice_metric(pred[0, k] > 0, t[0, k]) for k in range(2)])
        assert abs(loss - hard) < 1e-4
        assert 0.0 <= loss <= 1.0

    def test_nonbinary_rejected(self):
        with pytest.raises(ValueError):
            dice_loss(np.zeros((1, 1, 2, 2, 2)), np.full((1, 1, 2, 2, 2), 0.3))


class TestBceLoss:
    def test_zero_logits_ln2(self):
        assert bce_loss(np.zeros((3, 4)), np.zeros((3, 4))).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_matches_naive_oracle(self, rng):
        s = rng.uniform(-5, 5, (4, 6))
        y = (rng.random((4, 6)) > 0.4) * 1.0
        sig = 1.0 / (1.0 + np.exp(-s))
        naive = float(np.mean(-y * np.log(sig) - (1 - y) * np.log(1 - sig)))
        assert bce_loss(s, y).item() == pytest.approx(naive, abs=1e-6)

    def test_gradcheck(self, rng):
        s = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        y = (rng.random((3, 4)) > 0.5) * 1.0
        res = finite_difference_check(lambda: bce_loss(s, y), [s], h=1e-4, samples=8, rng=rng, tol=1e-6)
        assert res.passed, res.max_rel_err


class TestTotalLoss:
    def test_weight_masking(self, rng):
        seg = rng.standard_normal((1, 2, 3, 3, 3))
        tgt = (rng.random((1, 2, 3, 3, 3)) > 0.5) * 1.0
        s = rng.uniform(-1, 1, (1, 2))
        y = np.array([[1.0, 0.0]])
        only_bce, parts = total_loss(seg, tgt, s, y, LossWeights(1, 0, 0))
        assert only_bce.item() == pytest.approx(parts["bce"], abs=1e-15)

    def test_additivity_exact(self, rng):
        seg = rng.standard_normal((1, 2, 3, 3, 3))
        tgt = (rng.random((1, 2, 3, 3, 3)) > 0.5) * 1.0
        s = rng.uniform(-1, 1, (1, 2))
        y = np.array([[0.0, 1.0]])
        tot, parts = total_loss(seg, tgt, s, y)
        assert tot.item() == parts["bce"] + parts["dice"] + parts["contrast"]

    def test_gradient_of_sum_is_sum_of_gradients(self, rng):
        seg = Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
        tgt = (rng.random((1, 1, 2, 2, 2)) > 0.5) * 1.0
        sv = Tensor(rng.uniform(-1, 1, (1, 1)), requires_grad=True)
        y = np.array([[1.0]])
        res = finite_difference_check(
            lambda: total_loss(seg, tgt, sv, y)[0], [seg, sv], h=1e-4, samples=8, rng=rng, tol=1e-5
        )
        assert res.passed, res.max_rel_err


class TestDiceMetric:
    def test_identical_nonempty(self):
        m = _cube()
        assert dice_metric(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((6, 6, 6)); a[:2] = 1
        b = np.zeros((6, 6, 6)); b[4:] = 1
        assert dice_metric(a, b) == 0.0

    def test_hand_counted_half(self):
        p = np.zeros((1, 1, 4)); p[0, 0, :2] = 1
        g = np.zeros((1, 1, 4)); g[0, 0, 1:3] = 1
        assert dice_metric(p, g) == 0.5

    def test_empty_conventions(self):
        z = np.zeros((4, 4, 4))
        assert dice_metric(z, z) == 1.0
        assert dice_metric(_cube(4, 0, 2), np.zeros((4, 4, 4))) == 0.0

    def test_symmetry_and_monotonicity(self, rng):
        g = _cube()
        prev = 0.0
        for grow in range(4, 9):
            p = np.zeros((12, 12, 12))
            p[3:grow, 3:8, 3:8] = 1.0  # nested masks growing toward g from inside
            cur = dice_metric(p, g)
            assert cur >= prev
            assert dice_metric(p, g) == dice_metric(g, p)
            prev = cur
        assert prev == 1.0


class TestNsdMetric:
    SPEC = SurfaceSpec(tolerance_mm=2.0, spacing_mm=(1.5, 1.5, 1.5))

    def test_identical_masks(self):
        m = _cube()
        assert nsd_metric(m, m, self.SPEC) == 1.0

    def test_one_voxel_shift_within_tolerance(self):
        m = _cube()
        assert nsd_metric(m, np.roll(m, 1, axis=0), self.SPEC) == 1.0

    def test_two_voxel_shift_matches_loop_oracle(self):
        m = _cube()
        shifted = np.roll(m, 2, axis=0)
        got = nsd_metric(m, shifted, self.SPEC)
        want = nsd_loop_oracle(m, shifted, (1.5, 1.5, 1.5), 2.0)
        assert got == pytest.approx(want, abs=1e-9)
        assert got < 1.0

    @settings(deadline=None, max_examples=10)
    @given(seed=st.integers(0, 2**31))
    def test_random_blobs_match_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        p = (rng.random((7, 7, 7)) > 0.6).astype(float)
        g = (rng.random((7, 7, 7)) > 0.6).astype(float)
        got = nsd_metric(p, g, self.SPEC)
        want = nsd_loop_oracle(p, g, (1.5, 1.5, 1.5), 2.0)
        assert got == pytest.approx(want, abs=1e-9)

    def test_symmetric(self, rng):
        p = (rng.random((6, 6, 6)) > 0.5).astype(float)
        g = (rng.random((6, 6, 6)) > 0.5).astype(float)
        assert nsd_metric(p, g, self.SPEC) == nsd_metric(g, p, self.SPEC)

    def test_empty_conventions(self):
        z = np.zeros((5, 5, 5))
        assert nsd_metric(z, z, self.SPEC) == 1.0
        assert nsd_metric(_cube(5, 1, 3), z, self.SPEC) == 0.0

    def test_spacing_matters(self):
        m = _cube()
        shifted = np.roll(m, 1, axis=0)
        coarse = SurfaceSpec(tolerance_mm=2.0, spacing_mm=(3.0, 3.0, 3.0))
        assert nsd_metric(m, shifted, coarse) < 1.0

    def test_full_volume_surface_is_boundary(self):
        full = np.ones((4, 4, 4))
        surf = surface_voxels(full)
        assert not surf[1:3, 1:3, 1:3].any()
        assert surf[0].all() and surf[-1].all()


def test_per_class_metrics_rows(rng):
    g = np.stack([_cube(), np.roll(_cube(), 1, axis=1)])
    rows = per_class_metrics(g, g)
    assert [r["dice"] for r in rows] == [1.0, 1.0]
    assert [r["nsd"] for r in rows] == [1.0, 1.0]
