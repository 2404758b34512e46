"""Seeded finite-difference suite over every layer, model and differentiable loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .denoiser import DenoiserConfig, ToyDenoiser
from .gradcheck import check_layer, check_module
from .losses import SoftClipConfig, mse_loss, sobel_loss, softclip_loss
from .layers import GradTape
from .semantic import SemanticConfig, SemanticExtractor
from .structural import StructuralConfig, StructuralGenerator
from .tensor import Rng

TOLERANCE = 1e-4


@dataclass
class GradResult:
    component: str
    instance: int
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _layer_cases(rng: Rng):
    """(name, layer, input, train) for one random instance of each layer kind."""
    r = rng
    return [
        ("Linear", L.Linear(5, 4, r), r.randn((3, 5)), False),
        ("LayerNorm", _perturbed(L.LayerNorm(6), r), r.randn((3, 6)), False),
        ("GroupNorm", _perturbed(L.GroupNorm(2, 4), r), r.randn((2, 4, 3, 3)), False),
        ("SiLU", L.SiLU(), r.randn((3, 4)), False),
        ("Dropout", L.Dropout(0.3), r.randn((4, 5)), True),
        ("NearestUpsample2x", L.NearestUpsample2x(), r.randn((2, 2, 3, 3)), False),
        ("AvgPool2x", L.AvgPool2x(), r.randn((2, 2, 4, 4)), False),
        ("Reshape", L.Reshape((2, 3)), r.randn((2, 6)), False),
        ("L2Normalize", L.L2Normalize(), r.randn((3, 5)), False),
        ("Conv2d", L.Conv2d(2, 3, r), r.randn((2, 2, 4, 4)), False),
        ("ResidualMLPBlock", L.ResidualMLPBlock(5, 0.2, r), r.randn((3, 5)), True),
        ("Sequential", L.Sequential(L.Linear(4, 6, r), L.SiLU(), L.Linear(6, 3, r)), r.randn((2, 4)), False),
    ]


def _perturbed(layer, rng: Rng):
    # move affine parameters off their (1, 0) init so their gradients are generic
    for p in layer.params().values():
        p += 0.3 * rng.randn(p.shape)
    return layer


def _scalar_loss_tape(value_and_grad, pred):
    value, grad = value_and_grad(pred)
    return np.array(value), GradTape(lambda g: (g * grad, {}), (), "loss")


def _structural_case(seed, rng):
    cfg = StructuralConfig(voxel_dim=6, hidden=8, blocks=1, dropout=0.2, latent_size=8, grid=4,
                           features=4, groups=2, seed=seed)
    model = StructuralGenerator(cfg)

    def fwd(inputs, train, r):
        return model.forward(inputs["v"], train=train, rng=r)

    return check_module(fwd, model.params(), {"v": rng.randn((2, 6))}, seed, train=True, max_elems=40)


def _semantic_case(seed, rng):
    model = SemanticExtractor(SemanticConfig(voxel_dim=6, hidden=8, blocks=1, dropout=0.2, embed_dim=5, seed=seed))
    d = model.cfg.embed_dim

    def fwd(inputs, train, r):
        (e_img, e_cap), backward = model.forward(inputs["v"], train=train, rng=r)
        y = np.concatenate([e_img, e_cap], axis=1)
        return y, GradTape(lambda g: backward(g[:, :d], g[:, d:]), y.shape, "semantic")

    return check_module(fwd, model.params(), {"v": rng.randn((3, 6))}, seed, train=True, max_elems=40)


def _denoiser_case(seed, rng):
    model = ToyDenoiser(DenoiserConfig(latent_size=4, features=4, embed_dim=6, attn_dim=4, time_dim=8, seed=seed))
    t = rng.integers(0, 50, (2,))
    keep = rng.uniform((2, 2)) > 0.3

    def fwd(inputs, train, r):
        return model.forward(inputs["z"], t, inputs["cond"], keep)

    inputs = {"z": rng.randn((2, 3, 4, 4)), "cond": rng.randn((2, 2, 6))}
    return check_module(fwd, model.params(), inputs, seed, max_elems=40)


def _loss_case(fn):
    def run(seed, rng):
        pred, target = fn.make(rng)

        def fwd(inputs, train, r):
            return _scalar_loss_tape(lambda p: fn(p, target), inputs["pred"])

        return check_module(fwd, {}, {"pred": pred}, seed)

    return run


def _softclip(p, t):
    return softclip_loss(p, t, SoftClipConfig(0.5), return_grad=True)


_softclip.make = lambda r: (r.randn((4, 5)), r.randn((4, 5)))


def _sobel(p, t):
    return sobel_loss(p, t, return_grad=True)


_sobel.make = lambda r: (r.randn((2, 3, 5, 5)), r.randn((2, 3, 5, 5)))


def _mse(p, t):
    return mse_loss(p, t, return_grad=True)


_mse.make = lambda r: (r.randn((3, 4)), r.randn((3, 4)))

MODEL_CASES = {
    "StructuralGenerator": _structural_case,
    "SemanticExtractor": _semantic_case,
    "ToyDenoiser": _denoiser_case,
    "softclip_loss": _loss_case(_softclip),
    "sobel_loss": _loss_case(_sobel),
    "mse_loss": _loss_case(_mse),
}


def gradient_suite(instances: int = 20, seed: int = 0, components=None) -> list[GradResult]:
    """Run ``instances`` seeded random checks per component; one result per (component, instance)."""
    results = []
    for i in range(instances):
        rng = Rng(seed).child(i)
        for name, layer, x, train in _layer_cases(rng.child(0)):
            if components is None or name in components:
                errs = check_layer(layer, x, seed=i, train=train)
                results.append(GradResult(name, i, max(errs.values())))
        for name, case in MODEL_CASES.items():
            if components is None or name in components:
                errs = case(i, rng.child(1))
                results.append(GradResult(name, i, max(errs.values())))
    return results


def summarize(results: list[GradResult]) -> dict[str, float]:
    """Worst relative error per component."""
    out: dict[str, float] = {}
    for r in results:
        out[r.component] = max(out.get(r.component, 0.0), r.max_rel_error)
    return out
