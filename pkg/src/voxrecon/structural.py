"""Spatial-ROI voxels -> latent prior."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import (
    Conv2d,
    Dropout,
    GroupNorm,
    LayerNorm,
    Linear,
    NearestUpsample2x,
    Reshape,
    ResidualMLPBlock,
    Sequential,
    SiLU,
)
from .losses import mse_loss, sobel_loss, structural_loss
from .tensor import Rng, ShapeError
from .training import TrainConfig, TrainLog, run_epochs


@dataclass
class StructuralConfig:
    voxel_dim: int = 512
    hidden: int = 256
    blocks: int = 2
    dropout: float = 0.0
    latent_channels: int = 3
    latent_size: int = 16
    grid: int = 4  # side of the low-resolution map before upsampling
    features: int = 32  # channels of the low-resolution map
    groups: int = 8
    # weight of the Sobel term in training; 1/16 puts a unit step edge on the same
    # scale as a unit pixel error (the raw kernels respond with magnitude 4)
    edge_weight: float = 0.0625
    seed: int = 0


class StructuralGenerator:
    """Linear -> LayerNorm -> SiLU -> Dropout -> residual blocks -> Linear to a
    ``features x grid x grid`` map -> GroupNorm -> (upsample 2x -> 3x3 conv) stages
    until the latent size is reached; the last conv maps to latent channels."""

    kind = "structural"

    def __init__(self, cfg: StructuralConfig = StructuralConfig()):
        self.cfg = cfg
        stages = int(np.log2(cfg.latent_size // cfg.grid))
        if cfg.grid * 2**stages != cfg.latent_size:
            raise ValueError(f"latent size {cfg.latent_size} is not grid {cfg.grid} times a power of two")
        rng = Rng(cfg.seed)
        f = cfg.features
        layers = [Linear(cfg.voxel_dim, cfg.hidden, rng), LayerNorm(cfg.hidden), SiLU(), Dropout(cfg.dropout)]
        layers += [ResidualMLPBlock(cfg.hidden, cfg.dropout, rng) for _ in range(cfg.blocks)]
        layers += [Linear(cfg.hidden, f * cfg.grid * cfg.grid, rng), Reshape((f, cfg.grid, cfg.grid)),
                   GroupNorm(cfg.groups, f)]
        for s in range(stages):
            last = s == stages - 1
            layers += [NearestUpsample2x(), Conv2d(f, cfg.latent_channels if last else f, rng)]
            if not last:
                layers.append(SiLU())
        if stages == 0:
            layers.append(Conv2d(f, cfg.latent_channels, rng))
        self.net = Sequential(*layers)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size)

    def params(self) -> dict[str, np.ndarray]:
        return self.net.params()

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    def describe(self) -> dict:
        return self.net.describe()

    def forward(self, v, train: bool = False, rng: Rng | None = None):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.cfg.voxel_dim:
            raise ShapeError(f"structural generator expects (B, {self.cfg.voxel_dim}) voxels, got {v.shape}")
        return self.net.forward(v, train=train, rng=rng)

    def __call__(self, v) -> np.ndarray:
        """Eval-mode latent prior for a (V,) vector or (B, V) batch."""
        v = np.asarray(v, dtype=np.float64)
        single = v.ndim == 1
        z, _ = self.forward(v[None] if single else v)
        return z[0] if single else z


def sg_forward(model: StructuralGenerator, v_spatial, train: bool = False, rng: Rng | None = None):
    return model(v_spatial) if not train else model.forward(np.atleast_2d(v_spatial), True, rng)[0]


def sg_train(model: StructuralGenerator, v_spatial, z_img, cfg: TrainConfig = TrainConfig(),
             optimizer=None, start_epoch: int = 0, log: TrainLog | None = None, on_epoch=None):
    """Adam on ``mse + edge_weight * sobel``. Logs ``loss``, ``mse`` and ``sobel`` per epoch."""
    v_spatial = np.asarray(v_spatial, dtype=np.float64)
    z_img = np.asarray(z_img, dtype=np.float64)
    if len(v_spatial) != len(z_img):
        raise ShapeError(f"{len(v_spatial)} voxel rows vs {len(z_img)} latents")

    def step(idx, rng):
        z, tape = model.forward(v_spatial[idx], train=True, rng=rng)
        loss, g = structural_loss(z, z_img[idx], return_grad=True, edge_weight=model.cfg.edge_weight)
        _, grads = tape.backward(g)
        return {"loss": loss, "mse": mse_loss(z, z_img[idx]), "sobel": sobel_loss(z, z_img[idx]), "grads": grads}

    return run_epochs(step, len(v_spatial), model.params(), cfg, optimizer, start_epoch, log, on_epoch)


def eval_loss(model: StructuralGenerator, v_spatial, z_img) -> float:
    return structural_loss(model(np.asarray(v_spatial)), np.asarray(z_img), edge_weight=model.cfg.edge_weight)
