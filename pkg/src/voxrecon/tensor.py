"""Dense float64 arrays, seeded normal sampling, 3x3 convolution and the VXD file format.

Arrays are plain ``numpy.ndarray`` values in float64. The helpers here add the
boundary checks (shape agreement, finiteness) the rest of the package relies on.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

VXD_MAGIC = b"VXD1"

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "VXDFormatError",
    "Rng",
    "as_tensor",
    "matmul",
    "conv2d_3x3",
    "conv2d_3x3_adjoint",
    "replicate_pad",
    "replicate_pad_adjoint",
    "randn",
    "vxd_bytes",
    "parse_vxd",
    "write_vxd",
    "read_vxd",
]


class ShapeError(ValueError):
    """Raised when array shapes do not satisfy an operation's contract."""


class NonFiniteError(ValueError):
    """Raised when NaN or Inf reaches a checked boundary."""


class VXDFormatError(ValueError):
    pass


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Convert to a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


class Rng:
    """Seeded stream of uniforms and standard normals.

    Built directly on the PCG64 raw 64-bit output, with uniforms taken from the
    top 53 bits and normals produced by Box-Muller, so the stream only depends on
    the seed and the call sequence.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._bits = np.random.PCG64(seed)
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        self.counter += n
        return self._bits.random_raw(n)

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform samples in the open interval (0, 1)."""
        n = math.prod(shape) if isinstance(shape, tuple) else int(shape)
        raw = self._raw(n)
        u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
        return u.reshape(shape)

    def randn(self, shape=()) -> np.ndarray:
        shape = tuple(shape) if not isinstance(shape, int) else (shape,)
        n = math.prod(shape)
        half = (n + 1) // 2
        u = self.uniform((2 * half,))
        r = np.sqrt(-2.0 * np.log(u[:half]))
        theta = 2.0 * np.pi * u[half:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high)."""
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform((n,)), kind="stable")

    def child(self, key: int) -> "Rng":
        """Independent substream keyed by ``key``; does not advance this stream."""
        state = np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)
        return Rng(int(state[0]))


def randn(rng: Rng, shape) -> np.ndarray:
    return rng.randn(shape)


def _pad_index(n: int) -> np.ndarray:
    return np.clip(np.arange(-1, n + 1), 0, n - 1)


def replicate_pad(x: np.ndarray) -> np.ndarray:
    """Pad the last two axes by one pixel, repeating the border."""
    h, w = x.shape[-2:]
    return x[..., _pad_index(h)[:, None], _pad_index(w)[None, :]]


def replicate_pad_adjoint(gp: np.ndarray) -> np.ndarray:
    """Fold a gradient on the padded grid back onto the unpadded grid."""
    g = gp[..., 1:-1, 1:-1].copy()
    g[..., 0, :] += gp[..., 0, 1:-1]
    g[..., -1, :] += gp[..., -1, 1:-1]
    g[..., :, 0] += gp[..., 1:-1, 0]
    g[..., :, -1] += gp[..., 1:-1, -1]
    g[..., 0, 0] += gp[..., 0, 0]
    g[..., 0, -1] += gp[..., 0, -1]
    g[..., -1, 0] += gp[..., -1, 0]
    g[..., -1, -1] += gp[..., -1, -1]
    return g


def _check_kernel(kernel) -> np.ndarray:
    k = np.asarray(kernel, dtype=np.float64)
    if k.shape != (3, 3):
        raise ShapeError(f"conv2d_3x3: kernel must be 3x3, got {k.shape}")
    return k


def conv2d_3x3(x, kernel) -> np.ndarray:
    """Per-channel 2-D cross-correlation with replicate padding.

    Works on any array whose last two axes are (H, W); leading axes are channels
    and/or batch.
    """
    x = np.asarray(x, dtype=np.float64)
    k = _check_kernel(kernel)
    if x.ndim < 2 or min(x.shape[-2:]) < 1:
        raise ShapeError(f"conv2d_3x3: need (..., H, W) with H, W >= 1, got {x.shape}")
    h, w = x.shape[-2:]
    xp = replicate_pad(x)
    out = np.zeros_like(x)
    for a in range(3):
        for b in range(3):
            if k[a, b] != 0.0:
                out += k[a, b] * xp[..., a:a + h, b:b + w]
    return out


def conv2d_3x3_adjoint(g, kernel) -> np.ndarray:
    """Adjoint of :func:`conv2d_3x3` with respect to its input."""
    g = np.asarray(g, dtype=np.float64)
    k = _check_kernel(kernel)
    h, w = g.shape[-2:]
    gp = np.zeros(g.shape[:-2] + (h + 2, w + 2))
    for a in range(3):
        for b in range(3):
            if k[a, b] != 0.0:
                gp[..., a:a + h, b:b + w] += k[a, b] * g
    return replicate_pad_adjoint(gp)


# VXD: b"VXD1", u32 rank, rank x u32 dims, float32 payload, all little-endian.

def vxd_bytes(x) -> bytes:
    arr = as_tensor(x, "vxd payload")
    header = VXD_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def parse_vxd(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != VXD_MAGIC:
        raise VXDFormatError("not a VXD file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise VXDFormatError("truncated VXD header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    n = math.prod(dims)
    if len(buf) != off + 4 * n:
        raise VXDFormatError(f"VXD payload has {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(dims)


def write_vxd(path, x) -> None:
    Path(path).write_bytes(vxd_bytes(x))


def read_vxd(path) -> np.ndarray:
    return parse_vxd(Path(path).read_bytes())
