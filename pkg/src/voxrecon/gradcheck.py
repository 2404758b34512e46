"""Central finite-difference checks for tapes and losses."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Rng

FD_STEP = 1e-5


def rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_module(forward: Callable, params: dict[str, np.ndarray], inputs: dict[str, np.ndarray],
                 seed: int, train: bool = False, max_elems: int | None = None) -> dict[str, float]:
    """Compare a tape's gradients against finite differences.

    ``forward(inputs, train, rng)`` must return ``(y, tape)`` where
    ``tape.backward(g)`` returns ``(grads_by_input, grads_by_param)``; with a
    single input the first element may be a bare array. A fresh ``Rng(seed)`` is
    passed on every call so stochastic layers see identical masks.
    Returns the relative error per input and per parameter.
    """
    y, tape = forward(inputs, train, Rng(seed))
    cot = Rng(seed ^ 0x5EED).randn(np.shape(y))

    def scalar():
        out, _ = forward(inputs, train, Rng(seed))
        return float(np.sum(out * cot))

    g_in, g_par = tape.backward(cot)
    if not isinstance(g_in, dict):
        (only,) = inputs
        g_in = {only: g_in}

    errors = {}
    targets = [(f"input:{k}", v, g_in[k]) for k, v in inputs.items()]
    targets += [(f"param:{k}", v, g_par.get(k, np.zeros_like(v))) for k, v in params.items()]
    for name, arr, analytic in targets:
        if max_elems is not None and arr.size > max_elems:
            errors[name] = _sampled_error(scalar, arr, analytic, max_elems, seed)
        else:
            errors[name] = rel_error(analytic, numeric_grad(scalar, arr))
    return errors


def _sampled_error(f, arr, analytic, k, seed, h=FD_STEP):
    idx = Rng(seed + 17).permutation(arr.size)[:k]
    flat = arr.reshape(-1)
    a = analytic.reshape(-1)[idx]
    n = np.empty(k)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        n[j] = (fp - fm) / (2 * h)
    return rel_error(a, n)


def check_layer(layer, x: np.ndarray, seed: int, train: bool = False,
                max_elems: int | None = None) -> dict[str, float]:
    def fwd(inputs, tr, rng):
        return layer.forward(inputs["x"], train=tr, rng=rng)

    return check_module(fwd, layer.params(), {"x": x}, seed, train, max_elems)
