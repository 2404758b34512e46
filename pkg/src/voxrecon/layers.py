"""Layers with explicit forward/backward passes.

Every layer's ``forward`` returns the output together with a :class:`GradTape`.
Calling ``tape.backward(grad_out)`` gives ``(grad_in, param_grads)`` where
``param_grads`` is keyed like ``layer.params()``. Parameters are float64 arrays
owned by the layer and updated in place by :class:`Adam`.

Inputs are batched: the leading axis is the batch axis.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .tensor import Rng, ShapeError, replicate_pad, replicate_pad_adjoint

NORM_EPS = 1e-5


class GradTape:
    def __init__(self, backward: Callable, out_shape: tuple, kind: str = ""):
        self._backward = backward
        self.out_shape = tuple(out_shape)
        self.kind = kind

    def backward(self, grad_out):
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != self.out_shape:
            raise ShapeError(
                f"{self.kind or 'layer'} backward: grad shape {grad_out.shape} != output shape {self.out_shape}"
            )
        return self._backward(grad_out)


def _uniform_init(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(shape) * (2 * bound) - bound


class Layer:
    kind = "Layer"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, train: bool = False, rng: Rng | None = None):
        raise NotImplementedError

    def __call__(self, x):
        y, _ = self.forward(x, train=False)
        return y

    def describe(self) -> dict:
        return {"kind": self.kind}


class Linear(Layer):
    kind = "Linear"

    def __init__(self, in_dim: int, out_dim: int, rng: Rng | None = None):
        self.in_dim, self.out_dim = in_dim, out_dim
        if rng is None:
            self.weight = np.zeros((out_dim, in_dim))
            self.bias = np.zeros(out_dim)
        else:
            self.weight = _uniform_init(rng, (out_dim, in_dim), in_dim)
            self.bias = _uniform_init(rng, (out_dim,), in_dim)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def describe(self):
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"Linear: expected last dim {self.in_dim}, got shape {x.shape}")
        y = x @ self.weight.T + self.bias

        def backward(g):
            g2 = g.reshape(-1, self.out_dim)
            x2 = x.reshape(-1, self.in_dim)
            grads = {"weight": g2.T @ x2, "bias": g2.sum(axis=0)}
            return g @ self.weight, grads

        return y, GradTape(backward, y.shape, self.kind)


def _normalize_backward(g_hat, x_hat, inv_std, axes):
    # gradient of (x - mean) / sqrt(var + eps) over `axes`
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * x_hat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - x_hat * m2)


class LayerNorm(Layer):
    kind = "LayerNorm"

    def __init__(self, dim: int, eps: float = NORM_EPS):
        self.dim, self.eps = dim, eps
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def describe(self):
        return {"kind": self.kind, "dim": self.dim, "eps": self.eps}

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"LayerNorm: expected last dim {self.dim}, got shape {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mu) * inv_std
        y = x_hat * self.gamma + self.beta

        def backward(g):
            lead = tuple(range(g.ndim - 1))
            grads = {"gamma": (g * x_hat).sum(axis=lead), "beta": g.sum(axis=lead)}
            return _normalize_backward(g * self.gamma, x_hat, inv_std, -1), grads

        return y, GradTape(backward, y.shape, self.kind)


class GroupNorm(Layer):
    kind = "GroupNorm"

    def __init__(self, groups: int, channels: int, eps: float = NORM_EPS):
        if groups < 1 or channels % groups:
            raise ValueError(f"GroupNorm: {groups} groups do not divide {channels} channels")
        self.groups, self.channels, self.eps = groups, channels, eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def describe(self):
        return {"kind": self.kind, "groups": self.groups, "channels": self.channels, "eps": self.eps}

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"GroupNorm: expected (B, {self.channels}, H, W), got {x.shape}")
        b, c, h, w = x.shape
        xg = x.reshape(b, self.groups, -1)
        mu = xg.mean(axis=-1, keepdims=True)
        var = xg.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = ((xg - mu) * inv_std).reshape(x.shape)
        gamma = self.gamma[None, :, None, None]
        y = x_hat * gamma + self.beta[None, :, None, None]

        def backward(g):
            grads = {"gamma": (g * x_hat).sum(axis=(0, 2, 3)), "beta": g.sum(axis=(0, 2, 3))}
            g_hat = (g * gamma).reshape(b, self.groups, -1)
            gx = _normalize_backward(g_hat, x_hat.reshape(b, self.groups, -1), inv_std, -1)
            return gx.reshape(x.shape), grads

        return y, GradTape(backward, y.shape, self.kind)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class SiLU(Layer):
    kind = "SiLU"

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        s = _sigmoid(x)
        y = x * s

        def backward(g):
            return g * (s + x * s * (1.0 - s)), {}

        return y, GradTape(backward, y.shape, self.kind)


class Dropout(Layer):
    """Inverted dropout: train-mode outputs are rescaled by 1/(1-p), eval is identity."""

    kind = "Dropout"

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p

    def describe(self):
        return {"kind": self.kind, "p": self.p}

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if not train or self.p == 0.0:
            return x, GradTape(lambda g: (g, {}), x.shape, self.kind)
        if rng is None:
            raise ValueError("Dropout in train mode needs an Rng")
        mask = (rng.uniform(x.shape) >= self.p) / (1.0 - self.p)
        return x * mask, GradTape(lambda g: (g * mask, {}), x.shape, self.kind)


class NearestUpsample2x(Layer):
    kind = "NearestUpsample2x"

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2:
            raise ShapeError(f"NearestUpsample2x: need (..., H, W), got {x.shape}")
        y = x.repeat(2, axis=-2).repeat(2, axis=-1)

        def backward(g):
            h, w = x.shape[-2:]
            return g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)), {}

        return y, GradTape(backward, y.shape, self.kind)


def nearest_upsample2x(x) -> np.ndarray:
    return NearestUpsample2x()(x)


class AvgPool2x(Layer):
    kind = "AvgPool2x"

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(f"AvgPool2x: spatial dims must be even, got {x.shape}")
        y = x.reshape(x.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1))

        def backward(g):
            return 0.25 * g.repeat(2, axis=-2).repeat(2, axis=-1), {}

        return y, GradTape(backward, y.shape, self.kind)


class Reshape(Layer):
    kind = "Reshape"

    def __init__(self, shape: tuple):
        self.shape = tuple(shape)

    def describe(self):
        return {"kind": self.kind, "shape": list(self.shape)}

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        y = x.reshape((x.shape[0],) + self.shape)
        return y, GradTape(lambda g: (g.reshape(x.shape), {}), y.shape, self.kind)


class L2Normalize(Layer):
    kind = "L2Normalize"

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(norm == 0.0):
            raise ValueError("L2Normalize: zero vector")
        y = x / norm

        def backward(g):
            return (g - y * (g * y).sum(axis=-1, keepdims=True)) / norm, {}

        return y, GradTape(backward, y.shape, self.kind)


class Conv2d(Layer):
    """3x3 multi-channel convolution, stride 1, replicate padding."""

    kind = "Conv2d"

    def __init__(self, in_ch: int, out_ch: int, rng: Rng | None = None):
        self.in_ch, self.out_ch = in_ch, out_ch
        fan_in = in_ch * 9
        if rng is None:
            self.weight = np.zeros((out_ch, in_ch, 3, 3))
            self.bias = np.zeros(out_ch)
        else:
            self.weight = _uniform_init(rng, (out_ch, in_ch, 3, 3), fan_in)
            self.bias = _uniform_init(rng, (out_ch,), fan_in)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def describe(self):
        return {"kind": self.kind, "in_ch": self.in_ch, "out_ch": self.out_ch}

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"Conv2d: expected (B, {self.in_ch}, H, W), got {x.shape}")
        b, c, h, w = x.shape
        xp = replicate_pad(x)
        # cols[b, i, j, c, a, d] = xp[b, c, i + a, j + d]
        cols = np.empty((b, h, w, c, 3, 3))
        for a in range(3):
            for d in range(3):
                cols[..., a, d] = xp[:, :, a:a + h, d:d + w].transpose(0, 2, 3, 1)
        cols = cols.reshape(b * h * w, c * 9)
        wmat = self.weight.reshape(self.out_ch, -1)
        y = (cols @ wmat.T + self.bias).reshape(b, h, w, self.out_ch).transpose(0, 3, 1, 2)

        def backward(g):
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
            grads = {"weight": (g2.T @ cols).reshape(self.weight.shape), "bias": g2.sum(axis=0)}
            gcols = (g2 @ wmat).reshape(b, h, w, c, 3, 3)
            gp = np.zeros((b, c, h + 2, w + 2))
            for a in range(3):
                for d in range(3):
                    gp[:, :, a:a + h, d:d + w] += gcols[..., a, d].transpose(0, 3, 1, 2)
            return replicate_pad_adjoint(gp), grads

        return y, GradTape(backward, y.shape, self.kind)


class Sequential(Layer):
    kind = "Sequential"

    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.params().items():
                out[f"{i}.{name}"] = p
        return out

    def describe(self):
        return {"kind": self.kind, "layers": [layer.describe() for layer in self.layers]}

    def forward(self, x, train=False, rng=None):
        tapes = []
        for layer in self.layers:
            x, tape = layer.forward(x, train=train, rng=rng)
            tapes.append(tape)

        def backward(g):
            grads = {}
            for i in reversed(range(len(tapes))):
                g, sub = tapes[i].backward(g)
                for name, v in sub.items():
                    grads[f"{i}.{name}"] = v
            return g, grads

        return x, GradTape(backward, np.shape(x), self.kind)


class ResidualMLPBlock(Layer):
    """y = x + Linear(Dropout(SiLU(LayerNorm(Linear(x)))))."""

    kind = "ResidualMLPBlock"

    def __init__(self, dim: int, dropout: float = 0.1, rng: Rng | None = None):
        self.dim = dim
        self.mlp = Sequential(
            Linear(dim, dim, rng), LayerNorm(dim), SiLU(), Dropout(dropout), Linear(dim, dim, rng)
        )

    def params(self):
        return {f"mlp.{k}": v for k, v in self.mlp.params().items()}

    def describe(self):
        return {"kind": self.kind, "dim": self.dim, "dropout": self.mlp.layers[3].p}

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"ResidualMLPBlock: expected last dim {self.dim}, got shape {x.shape}")
        h, tape = self.mlp.forward(x, train=train, rng=rng)
        y = x + h

        def backward(g):
            gx, grads = tape.backward(g)
            return g + gx, {f"mlp.{k}": v for k, v in grads.items()}

        return y, GradTape(backward, y.shape, self.kind)


class Adam:
    """Adam over a named parameter dict; parameters are updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(tensors[f"adam.v.{k}"], dtype=np.float64)
        self.t = t
