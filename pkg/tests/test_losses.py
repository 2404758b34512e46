from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxrecon.losses import (
    GRAD_EPS,
    SOBEL_X,
    SOBEL_Y,
    SoftClipConfig,
    mse_loss,
    semantic_losses,
    sobel_loss,
    softclip_loss,
    structural_loss,
)
from voxrecon.tensor import Rng, ShapeError

seeds = st.integers(0, 2**32 - 1)


def _unit(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def brute_mse(p, t):
    total = 0.0
    for i in range(p.shape[0]):
        for a, b in zip(p[i].ravel(), t[i].ravel()):
            total += (a - b) ** 2
    return total / p.shape[0]


def brute_sobel_map(z):
    # z: (H, W), replicate padding, hand-unrolled correlation
    h, w = z.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    v = z[min(max(i + di, 0), h - 1), min(max(j + dj, 0), w - 1)]
                    gx += SOBEL_X[di + 1, dj + 1] * v
                    gy += SOBEL_Y[di + 1, dj + 1] * v
            out[i, j] = math.sqrt(gx * gx + gy * gy + GRAD_EPS)
    return out


def brute_softclip(p, t, tau):
    n = len(p)
    total = 0.0
    for i in range(n):
        lt = [sum(t[i, d] * t[j, d] for d in range(t.shape[1])) / tau for j in range(n)]
        lp = [sum(p[i, d] * t[j, d] for d in range(t.shape[1])) / tau for j in range(n)]
        zt = sum(math.exp(x) for x in lt)
        zp = sum(math.exp(x) for x in lp)
        for j in range(n):
            total -= math.exp(lt[j]) / zt * math.log(math.exp(lp[j]) / zp)
    return total


class TestKernels:
    def test_transpose_and_zero_sum(self):
        assert np.array_equal(SOBEL_Y, SOBEL_X.T)
        assert SOBEL_X.sum() == 0 and SOBEL_Y.sum() == 0


class TestMse:
    def test_examples(self):
        x = np.ones((2, 3))
        assert mse_loss(x, x) == 0.0
        assert mse_loss(np.array([1.0]), np.array([2.0])) == 1.0

    def test_vs_double_loop(self, rng):
        p, t = rng.randn((4, 3, 5)), rng.randn((4, 3, 5))
        assert mse_loss(p, t) == pytest.approx(brute_mse(p, t), rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros((2, 3)), np.zeros((3, 2)))


class TestSobel:
    def test_trivial(self, rng):
        z = rng.randn((2, 3, 4, 4))
        assert sobel_loss(z, z) == 0.0
        assert sobel_loss(np.full((1, 1, 4, 4), 0.2), np.full((1, 1, 4, 4), 0.9)) == 0.0

    def test_step_edge_vs_unrolled(self):
        step = np.zeros((1, 1, 4, 4))
        step[..., 2:] = 1.0
        flat = np.zeros((1, 1, 4, 4))
        expected = float(np.sum((brute_sobel_map(step[0, 0]) - brute_sobel_map(flat[0, 0])) ** 2))
        # columns 1 and 2 see |gx| = 4, elsewhere 0: 8 pixels of (4 - 1e-6)^2
        assert expected == pytest.approx(8 * (4 - 1e-6) ** 2, rel=1e-12)
        assert sobel_loss(step, flat) == pytest.approx(expected, rel=1e-12)

    def test_random_vs_unrolled(self, rng):
        p, t = rng.randn((2, 2, 5, 6)), rng.randn((2, 2, 5, 6))
        expected = sum(np.sum((brute_sobel_map(p[b, c]) - brute_sobel_map(t[b, c])) ** 2)
                       for b in range(2) for c in range(2)) / 2
        assert sobel_loss(p, t) == pytest.approx(expected, rel=1e-12)

    def test_needs_spatial_dims(self):
        with pytest.raises(ShapeError):
            sobel_loss(np.zeros((2, 3)), np.zeros((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(seeds, st.floats(-5, 5))
    def test_constant_shift_invariance(self, seed, c):
        r = Rng(seed)
        p, t = r.randn((2, 1, 5, 5)), r.randn((2, 1, 5, 5))
        assert sobel_loss(p + c, t + c) == pytest.approx(sobel_loss(p, t), rel=1e-9, abs=1e-9)


class TestStructural:
    def test_constants_mse_only(self):
        p, t = np.full((1, 3, 4, 4), 0.1), np.full((1, 3, 4, 4), 0.6)
        assert structural_loss(p, t) == mse_loss(p, t)

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_component_sum(self, seed):
        r = Rng(seed)
        p, t = r.randn((2, 3, 4, 4)), r.randn((2, 3, 4, 4))
        assert structural_loss(p, t) == mse_loss(p, t) + sobel_loss(p, t)
        v, g = structural_loss(p, t, return_grad=True)
        assert v == mse_loss(p, t) + sobel_loss(p, t)
        assert np.array_equal(g, mse_loss(p, t, True)[1] + sobel_loss(p, t, True)[1])


class TestSoftClip:
    def test_single_element(self, rng):
        x = _unit(rng.randn((1, 8)))
        assert softclip_loss(x, _unit(rng.randn((1, 8)))) == 0.0

    def test_self_entropy_vs_double_sum(self, rng):
        t = _unit(rng.randn((5, 4)))
        tau = 0.5
        value = softclip_loss(t, t, SoftClipConfig(tau))
        assert value == pytest.approx(brute_softclip(t, t, tau), rel=1e-12)
        q = np.exp(t @ t.T / tau)
        q /= q.sum(axis=1, keepdims=True)
        assert value == pytest.approx(-np.sum(q * np.log(q)), rel=1e-12)

    def test_random_vs_double_sum(self, rng):
        p, t = _unit(rng.randn((6, 4))), _unit(rng.randn((6, 4)))
        assert softclip_loss(p, t) == pytest.approx(brute_softclip(p, t, 0.07), rel=1e-12)

    def test_permutation_invariant(self, rng):
        p, t = _unit(rng.randn((6, 5))), _unit(rng.randn((6, 5)))
        perm = rng.permutation(6)
        assert softclip_loss(p[perm], t[perm]) == pytest.approx(softclip_loss(p, t), rel=1e-12)

    def test_errors(self):
        with pytest.raises(ShapeError):
            softclip_loss(np.zeros((0, 3)), np.zeros((0, 3)))
        with pytest.raises(FloatingPointError):
            softclip_loss(np.full((2, 2), np.inf), np.ones((2, 2)))
        with pytest.raises(ValueError):
            SoftClipConfig(0.0)

    def test_grad_4x8(self, rng):
        p, t = _unit(rng.randn((4, 8))), _unit(rng.randn((4, 8)))
        _, g = softclip_loss(p, t, return_grad=True)
        h = 1e-6
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            e = np.zeros_like(p)
            e[idx] = h
            num[idx] = (softclip_loss(p + e, t) - softclip_loss(p - e, t)) / (2 * h)
        assert np.max(np.abs(num - g)) / np.max(np.abs(g)) < 1e-4


class TestSemantic:
    def test_identical_single(self, rng):
        x, y = _unit(rng.randn((1, 6))), _unit(rng.randn((1, 6)))
        assert semantic_losses(x, y, x, y) == (0.0, 0.0)

    def test_component_sum(self, rng):
        pi, pc, ti, tc = (_unit(rng.randn((5, 6))) for _ in range(4))
        li, lc = semantic_losses(pi, pc, ti, tc)
        assert li == pytest.approx(softclip_loss(pi, ti) + mse_loss(pi, ti), rel=1e-14)
        assert lc == pytest.approx(softclip_loss(pc, tc) + mse_loss(pc, tc), rel=1e-14)

    def test_temperature_leaves_mse(self, rng):
        pi, pc, ti, tc = (_unit(rng.randn((5, 6))) for _ in range(4))
        for tau in (0.05, 1.0):
            li, _ = semantic_losses(pi, pc, ti, tc, SoftClipConfig(tau))
            assert li - softclip_loss(pi, ti, SoftClipConfig(tau)) == pytest.approx(mse_loss(pi, ti), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seeds, st.integers(1, 5))
def test_losses_nonnegative(seed, n):
    r = Rng(seed)
    p, t = r.randn((n, 2, 4, 4)), r.randn((n, 2, 4, 4))
    assert mse_loss(p, t) >= 0 and sobel_loss(p, t) >= 0
    a, b = _unit(r.randn((n, 5))), _unit(r.randn((n, 5)))
    assert softclip_loss(a, b) >= 0
