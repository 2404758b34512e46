from __future__ import annotations

import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxrecon.metrics import (
    MetricError,
    ZeroVarianceWarning,
    embedding_retrieval,
    evaluate,
    markdown_table,
    pixcorr,
    pooled_features,
    ssim,
    summary_csv,
    two_way_identification,
)
from voxrecon.tensor import Rng, ShapeError

seeds = st.integers(0, 2**32 - 1)


def brute_pearson(a, b):
    x, y = list(a.ravel()), list(b.ravel())
    mx, my = sum(x) / len(x), sum(y) / len(y)
    sxy = sum((u - mx) * (v - my) for u, v in zip(x, y))
    sxx = sum((u - mx) ** 2 for u in x)
    syy = sum((v - my) ** 2 for v in y)
    return sxy / math.sqrt(sxx * syy)


def brute_ssim_8x8(a, b):
    vals = []
    for i in range(2):
        for j in range(2):
            x, y = a[i:i + 7, j:j + 7].ravel(), b[i:i + 7, j:j + 7].ravel()
            mx, my = sum(x) / 49, sum(y) / 49
            vx = sum((u - mx) ** 2 for u in x) / 49
            vy = sum((u - my) ** 2 for u in y) / 49
            c = sum((u - mx) * (w - my) for u, w in zip(x, y)) / 49
            c1, c2 = 0.01**2, 0.03**2
            vals.append((2 * mx * my + c1) * (2 * c + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / 4


class TestPixcorr:
    def test_identity_and_reflection(self, rng):
        a = rng.uniform((3, 8, 8))
        assert pixcorr(a, a) == pytest.approx(1.0, abs=1e-15)
        assert pixcorr(a, 2 * a.mean() - a) == pytest.approx(-1.0, abs=1e-15)

    def test_vs_formula(self, rng):
        a, b = rng.uniform((3, 6, 6)), rng.uniform((3, 6, 6))
        assert pixcorr(a, b) == pytest.approx(brute_pearson(a, b), rel=1e-12)

    def test_constant_warns(self, rng):
        with pytest.warns(ZeroVarianceWarning):
            assert pixcorr(np.full((4, 4), 0.3), rng.uniform((4, 4))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            pixcorr(np.zeros((2, 2)), np.zeros((3, 3)))

    @settings(max_examples=40)
    @given(seeds, st.floats(0.01, 100), st.floats(-10, 10))
    def test_symmetry_and_affine(self, seed, alpha, beta):
        r = Rng(seed)
        a, b = r.uniform((3, 5, 5)), r.uniform((3, 5, 5))
        base = pixcorr(a, b)
        assert pixcorr(b, a) == pytest.approx(base, abs=1e-12)
        assert pixcorr(alpha * a + beta, b) == pytest.approx(base, abs=1e-9)
        assert -1 <= base <= 1


class TestSsim:
    def test_identity(self, rng):
        a = rng.uniform((3, 9, 11))
        assert ssim(a, a) == 1.0

    def test_equal_constants(self):
        assert ssim(np.full((8, 8), 0.4), np.full((8, 8), 0.4)) == 1.0

    def test_fixed_pair_vs_window_oracle(self):
        r = Rng(42)
        a = r.uniform((8, 8))
        b = np.clip(a + 0.2 * r.randn((8, 8)), 0, 1)
        expected = brute_ssim_8x8(a, b)
        assert expected == pytest.approx(0.7544773974120325, rel=1e-12)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-12)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((6, 8)), np.zeros((6, 8)))

    @settings(max_examples=25, deadline=None)
    @given(seeds, st.integers(7, 12), st.integers(7, 12))
    def test_self_similarity_and_range(self, seed, h, w):
        r = Rng(seed)
        a, b = r.uniform((3, h, w)), r.uniform((3, h, w))
        assert ssim(a, a) == 1.0
        assert -1 <= ssim(a, b) <= 1


def brute_two_way(f, g):
    n = len(f)
    hits = 0.0
    for i, j in itertools.permutations(range(n), 2):
        own, other = brute_pearson(f[i], g[i]), brute_pearson(f[i], g[j])
        hits += 1.0 if own > other else 0.5 if own == other else 0.0
    return 100 * hits / (n * (n - 1))


class TestTwoWay:
    def test_identical(self, rng):
        x = rng.uniform((5, 3, 8, 8))
        assert two_way_identification(x, x) == 100.0

    def test_constant_features_tie(self, rng):
        x = rng.uniform((4, 3, 8, 8))
        assert two_way_identification(x, x[::-1], lambda imgs: np.ones((len(imgs), 5))) == 50.0

    def test_three_items_vs_enumeration(self, rng):
        r, t = rng.uniform((3, 3, 4, 4)), rng.uniform((3, 3, 4, 4))
        assert two_way_identification(r, t) == pytest.approx(brute_two_way(r.reshape(3, -1), t.reshape(3, -1)))

    def test_too_few(self, rng):
        with pytest.raises(MetricError):
            two_way_identification(rng.uniform((1, 3, 4, 4)), rng.uniform((1, 3, 4, 4)))

    @settings(max_examples=25)
    @given(seeds)
    def test_joint_permutation(self, seed):
        r = Rng(seed)
        a, b = r.uniform((6, 3, 4, 4)), r.uniform((6, 3, 4, 4))
        p = r.permutation(6)
        assert two_way_identification(a[p], b[p]) == pytest.approx(two_way_identification(a, b), abs=1e-12)

    def test_pooled_features(self, rng):
        x = rng.uniform((2, 3, 16, 16))
        f = pooled_features(x)
        assert f.shape == (2, 3 * 64)
        assert f[1, 64 + 8 * 2 + 5] == pytest.approx(x[1, 1, 4:6, 10:12].mean())


def brute_topk(pred, true, k):
    n = len(pred)
    hits = 0.0
    for i in range(n):
        sims = [float(pred[i] @ true[j] / np.linalg.norm(pred[i]) / np.linalg.norm(true[j])) for j in range(n)]
        order = sorted(range(n), key=lambda j: -sims[j])
        hits += i in order[:k]
    return hits / n


class TestRetrieval:
    def test_trivial(self, rng):
        e = rng.randn((6, 4))
        assert embedding_retrieval(e, e) == 1.0
        assert embedding_retrieval(rng.randn((6, 4)), e, k=6) == 1.0

    @pytest.mark.parametrize("k", [1, 3])
    def test_random_vs_ranking(self, rng, k):
        p, t = rng.randn((10, 5)), rng.randn((10, 5))
        assert embedding_retrieval(p, t, k) == brute_topk(p, t, k)

    def test_zero_prediction_is_chance(self, rng):
        assert embedding_retrieval(np.zeros((8, 4)), rng.randn((8, 4))) == pytest.approx(1 / 8)

    def test_k_too_large(self, rng):
        with pytest.raises(MetricError):
            embedding_retrieval(rng.randn((3, 2)), rng.randn((3, 2)), k=4)


class TestReport:
    def test_evaluate_and_tables(self, rng):
        t = rng.uniform((4, 3, 16, 16))
        r = np.clip(t + 0.1 * rng.randn(t.shape), 0, 1)
        e = rng.randn((4, 5))
        rep = evaluate(r, t, [7, 8, 9, 10], e, e, e, e, label="full")
        assert -1 <= rep.pixcorr <= 1 and -1 <= rep.ssim <= 1 and 0 <= rep.two_way_feature_id <= 100
        assert rep.embedding_top1 == 1.0 and rep.embedding_cosine == pytest.approx(1.0)
        assert rep.items_csv().splitlines()[1].startswith("7,")
        assert "| full |" in markdown_table([rep])
        assert summary_csv([rep]).startswith("setting,pixcorr")

    def test_constant_recon_reported(self, rng):
        t = rng.uniform((2, 3, 8, 8))
        with pytest.warns(ZeroVarianceWarning):
            rep = evaluate(np.full_like(t, 0.5), t)
        assert rep.pixcorr == 0.0
