from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_block_means
from voxrecon.attributes import COLORS, GRID_SIZE, AttributeVector, UnknownAttributeError
from voxrecon.codec import Codec, autokl_decode, autokl_encode, read_ppm, write_ppm
from voxrecon.synth import gen_stimulus
from voxrecon.tensor import Rng, ShapeError


@pytest.fixture(scope="module")
def codec():
    return Codec(0)


class TestAutoKL:
    def test_constant(self):
        assert np.array_equal(autokl_encode(np.full((3, 8, 8), 0.3)), np.full((3, 2, 2), 0.3))

    def test_block_constant_exact(self, rng):
        z = rng.uniform((3, 4, 4))
        img = z.repeat(4, axis=1).repeat(4, axis=2)
        assert np.allclose(autokl_encode(img), z, rtol=0, atol=1e-15)
        assert np.allclose(autokl_decode(autokl_encode(img)), img, rtol=0, atol=1e-15)

    def test_random_vs_brute(self, rng):
        img = rng.uniform((3, 16, 16))
        assert np.allclose(autokl_encode(img), brute_block_means(img, 4), rtol=1e-14, atol=1e-15)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            autokl_encode(np.zeros((3, 6, 8)))

    def test_decode_constant_and_clamp(self):
        assert np.array_equal(autokl_decode(np.full((3, 2, 2), 0.4)), np.full((3, 8, 8), 0.4))
        assert autokl_decode(np.array([[[1.7]]])).max() == 1.0
        assert autokl_decode(np.array([[[-0.2]]])).min() == 0.0

    def test_batched(self, rng):
        imgs = rng.uniform((2, 3, 8, 8))
        assert np.array_equal(autokl_encode(imgs)[1], autokl_encode(imgs[1]))

    def test_roundtrip_error_bound_on_stimuli(self):
        ids = Rng(0).permutation(GRID_SIZE)[:64]
        for i in ids:
            x = gen_stimulus(AttributeVector.from_index(int(i)))
            err = np.abs(autokl_decode(autokl_encode(x)) - x).mean()
            blocks = x.reshape(3, 16, 4, 16, 4)
            assert err <= blocks.std(axis=(2, 4)).mean() + 1e-15


class TestEmbedders:
    def test_image_deterministic_unit(self, codec):
        img = gen_stimulus(AttributeVector(0, 1, 2, 3, 1, 2))
        e1, e2 = codec.clip_image_embed(img), Codec(0).clip_image_embed(img)
        assert np.array_equal(e1, e2)
        assert abs(np.linalg.norm(e1) - 1.0) < 1e-9

    def test_image_batch_matches_single(self, codec, rng):
        imgs = rng.uniform((3, 3, 64, 64))
        assert np.allclose(codec.clip_image_embed(imgs)[2], codec.clip_image_embed(imgs[2]), rtol=1e-13, atol=1e-15)

    def test_colour_pairs_distinct(self, codec):
        # exhaustive over the attribute grid the largest such cosine is 0.99825
        worst = -1.0
        for base in range(0, GRID_SIZE, 37):
            a = AttributeVector.from_index(base)
            embs = np.stack([codec.clip_image_embed(gen_stimulus(
                AttributeVector(a.shape_id, k, a.row, a.col, a.scale, a.background_id))) for k in range(len(COLORS))])
            g = embs @ embs.T
            np.fill_diagonal(g, -2)
            worst = max(worst, g.max())
        assert worst < 0.999

    def test_text_injective_over_grid(self, codec):
        e = np.stack([codec.clip_text_embed(AttributeVector.from_index(i)) for i in range(GRID_SIZE)])
        assert np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-12)
        g = e @ e.T
        np.fill_diagonal(g, -2)
        # frozen exhaustive maximum: 0.96833
        assert g.max() < 1 - 1e-6
        assert g.max() == pytest.approx(0.9683318293688428, abs=1e-9)

    def test_text_deterministic(self, codec):
        a = AttributeVector(3, 2, 1, 0, 0, 3)
        assert np.array_equal(codec.clip_text_embed(a), Codec(0).clip_text_embed(a))

    def test_tables_read_only(self, codec):
        with pytest.raises(ValueError):
            codec._image_proj[0, 0] = 1.0

    def test_wrong_image_size(self, codec):
        with pytest.raises(ShapeError):
            codec.clip_image_embed(np.zeros((3, 32, 32)))


class TestAttributes:
    @given(st.integers(0, GRID_SIZE - 1))
    def test_index_roundtrip(self, i):
        assert AttributeVector.from_index(i).index == i

    def test_unknown(self):
        with pytest.raises(UnknownAttributeError):
            AttributeVector(4, 0, 0, 0, 0, 0)
        with pytest.raises(UnknownAttributeError):
            AttributeVector.from_index(GRID_SIZE)

    def test_grid_size(self):
        assert GRID_SIZE == 4 * 8 * 4 * 4 * 2 * 4 == 4096

    def test_caption(self):
        assert AttributeVector(0, 0, 1, 2, 1, 3).caption() == "a large red circle at row 1 col 2 on a ramp background"


def test_ppm_roundtrip(tmp_path, rng):
    img = np.rint(rng.uniform((3, 5, 7)) * 255) / 255
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
