from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_conv3x3
from voxrecon.losses import SOBEL_X
from voxrecon.tensor import (
    NonFiniteError,
    Rng,
    ShapeError,
    VXDFormatError,
    as_tensor,
    conv2d_3x3,
    conv2d_3x3_adjoint,
    matmul,
    parse_vxd,
    randn,
    read_vxd,
    vxd_bytes,
    write_vxd,
)


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(np.eye(2), m), m)

    def test_zero(self):
        assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [0]]), [[0], [0]])

    def test_definition(self):
        assert np.array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17], [39]])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_associativity(self, seed):
        r = Rng(seed)
        a, b, c = r.randn((4, 4)), r.randn((4, 4)), r.randn((4, 4))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) <= 1e-9 * max(np.linalg.norm(left), 1e-300)


def test_as_tensor_rejects_nan():
    with pytest.raises(NonFiniteError):
        as_tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        as_tensor([np.inf])


class TestConv:
    def test_constant_zero_sum_kernel(self):
        x = np.full((2, 5, 6), 0.37)
        assert np.array_equal(conv2d_3x3(x, SOBEL_X), np.zeros_like(x))

    def test_delta_kernel(self, rng):
        x = rng.randn((3, 4, 5))
        k = np.zeros((3, 3))
        k[1, 1] = 1.0
        assert np.array_equal(conv2d_3x3(x, k), x)

    def test_ramp_sobel_table(self):
        # x[i, j] = 4i + j; frozen from the hand-unrolled oracle in conftest
        x = np.arange(16.0).reshape(1, 4, 4)
        expected = np.array([[4.0, 8.0, 8.0, 4.0]] * 4)
        assert np.array_equal(brute_conv3x3(x[0], SOBEL_X), expected)
        assert np.array_equal(conv2d_3x3(x, SOBEL_X)[0], expected)

    def test_random_against_oracle(self, rng):
        for _ in range(5):
            x = rng.randn((5, 7))
            k = rng.randn((3, 3))
            assert np.allclose(conv2d_3x3(x, k), brute_conv3x3(x, k), rtol=1e-13, atol=1e-13)

    def test_bad_kernel(self):
        with pytest.raises(ShapeError):
            conv2d_3x3(np.ones((4, 4)), np.ones((2, 2)))

    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, seed, a, b):
        r = Rng(seed)
        x, y, k = r.randn((2, 5, 4)), r.randn((2, 5, 4)), r.randn((3, 3))
        lhs = conv2d_3x3(a * x + b * y, k)
        rhs = a * conv2d_3x3(x, k) + b * conv2d_3x3(y, k)
        assert np.allclose(lhs, rhs, rtol=1e-9, atol=1e-9)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6))
    @settings(max_examples=30, deadline=None)
    def test_adjoint_identity(self, seed, h, w):
        r = Rng(seed)
        x, g, k = r.randn((h, w)), r.randn((h, w)), r.randn((3, 3))
        lhs = float(np.sum(conv2d_3x3(x, k) * g))
        rhs = float(np.sum(x * conv2d_3x3_adjoint(g, k)))
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


class TestRng:
    def test_same_seed_same_tensor(self):
        assert np.array_equal(randn(Rng(5), (3, 4)), randn(Rng(5), (3, 4)))

    def test_stream_reproducible(self):
        a, b = Rng(99), Rng(99)
        xs = np.concatenate([a.randn((100,)) for _ in range(100)])
        ys = np.concatenate([b.randn((100,)) for _ in range(100)])
        assert xs.size == 10_000
        assert np.array_equal(xs, ys)

    def test_moments(self):
        z = Rng(2024).randn((1_000_000,))
        assert abs(z.mean()) < 0.01
        assert abs(z.var() - 1.0) < 0.02

    def test_counter_advances(self):
        r = Rng(1)
        r.randn((3,))
        assert r.counter == 4  # Box-Muller consumes uniforms in pairs

    def test_child_independent_of_parent_position(self):
        r = Rng(7)
        c1 = r.child(3).randn((5,))
        r.randn((10,))
        assert np.array_equal(c1, r.child(3).randn((5,)))
        assert not np.array_equal(c1, r.child(4).randn((5,)))

    def test_uniform_open_interval(self):
        u = Rng(3).uniform((100_000,))
        assert u.min() > 0.0 and u.max() < 1.0

    def test_seed_range(self):
        with pytest.raises(ValueError):
            Rng(-1)
        with pytest.raises(ValueError):
            Rng(2**64)


class TestVXD:
    def test_layout(self):
        buf = vxd_bytes(np.array([[1.0, 2.0, 3.0]]))
        assert buf[:4] == b"VXD1"
        assert struct.unpack("<III", buf[4:16]) == (2, 1, 3)
        assert np.frombuffer(buf[16:], "<f4").tolist() == [1.0, 2.0, 3.0]

    def test_roundtrip(self, rng, tmp_path):
        x = rng.randn((2, 3, 4)).astype(np.float32).astype(np.float64)
        write_vxd(tmp_path / "x.vxd", x)
        assert np.array_equal(read_vxd(tmp_path / "x.vxd"), x)

    def test_bad_magic(self):
        with pytest.raises(VXDFormatError):
            parse_vxd(b"NOPE" + b"\0" * 8)

    def test_truncated(self):
        with pytest.raises(VXDFormatError):
            parse_vxd(vxd_bytes(np.ones(4))[:-1])

    def test_rank0_and_empty(self):
        assert parse_vxd(vxd_bytes(np.float64(2.5))).shape == ()
        assert parse_vxd(vxd_bytes(np.zeros((0, 3)))).shape == (0, 3)
