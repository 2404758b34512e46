"""Frozen stand-ins for the pixel/latent autoencoder and the image/text embedders.

The autoencoder pair is analytic: encoding is 4x4 block averaging per channel
and decoding is 4x nearest-neighbour upsampling followed by a clamp to [0, 1].
The embedders are seeded random linear maps followed by L2 normalization.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .attributes import FIELDS, AttributeVector
from .tensor import Rng, ShapeError

LATENT_FACTOR = 4
EMBED_DIM = 64
IMAGE_SIZE = 64
ATTR_EMBED_DIM = 16


def autokl_encode(img) -> np.ndarray:
    """(..., C, H, W) image -> (..., C, H/4, W/4) latent of block means."""
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape[-2:]
    f = LATENT_FACTOR
    if h % f or w % f:
        raise ShapeError(f"image dims {h}x{w} not divisible by {f}")
    return x.reshape(x.shape[:-2] + (h // f, f, w // f, f)).mean(axis=(-3, -1))


def autokl_decode(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    f = LATENT_FACTOR
    return np.clip(z.repeat(f, axis=-2).repeat(f, axis=-1), 0.0, 1.0)


class Codec:
    """Seeded, immutable image and caption embedders."""

    def __init__(self, seed: int = 0, image_size: int = IMAGE_SIZE, embed_dim: int = EMBED_DIM):
        if image_size % LATENT_FACTOR:
            raise ShapeError(f"image size {image_size} not divisible by {LATENT_FACTOR}")
        self.seed = seed
        self.image_size = image_size
        self.embed_dim = embed_dim
        rng = Rng(seed)
        n_pix = 3 * image_size * image_size
        self._image_proj = rng.child(1).randn((embed_dim, n_pix)) / np.sqrt(n_pix)
        table_rng = rng.child(2)
        self._tables = {name: table_rng.randn((n, ATTR_EMBED_DIM)) for name, n in FIELDS}
        n_cat = ATTR_EMBED_DIM * len(FIELDS)
        self._text_proj = rng.child(3).randn((embed_dim, n_cat)) / np.sqrt(n_cat)
        for arr in (self._image_proj, self._text_proj, *self._tables.values()):
            arr.setflags(write=False)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        s = self.image_size // LATENT_FACTOR
        return (3, s, s)

    def clip_image_embed(self, img) -> np.ndarray:
        """(3, H, W) -> (D,), or (B, 3, H, W) -> (B, D); unit L2 norm."""
        x = np.asarray(img, dtype=np.float64)
        single = x.ndim == 3
        x = x.reshape(1 if single else x.shape[0], -1)
        if x.shape[1] != self._image_proj.shape[1]:
            raise ShapeError(f"image has {x.shape[1]} values, embedder expects {self._image_proj.shape[1]}")
        e = x @ self._image_proj.T
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        return e[0] if single else e

    def clip_text_embed(self, attrs: AttributeVector) -> np.ndarray:
        feats = np.concatenate([self._tables[name][getattr(attrs, name)] for name, _ in FIELDS])
        e = self._text_proj @ feats
        return e / np.linalg.norm(e)


def write_ppm(path, img) -> None:
    """Write a (3, H, W) image in [0, 1] as binary PPM (P6, maxval 255)."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"PPM needs a (3, H, W) image, got {x.shape}")
    q = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = q.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + q.transpose(1, 2, 0).tobytes())


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = _PPM_HEADER.match(buf)
    if not m:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=m.end())
    return data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
