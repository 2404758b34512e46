"""Semantic-ROI voxels -> predicted image and caption embeddings."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import Dropout, L2Normalize, LayerNorm, Linear, ResidualMLPBlock, Sequential, SiLU
from .losses import SoftClipConfig, mse_loss, semantic_losses, softclip_loss
from .tensor import Rng, ShapeError
from .training import TrainConfig, TrainLog, run_epochs


@dataclass
class SemanticConfig:
    voxel_dim: int = 512
    hidden: int = 256
    blocks: int = 2
    dropout: float = 0.1
    embed_dim: int = 64
    temperature: float = 0.07
    seed: int = 0


class SemanticExtractor:
    """Shared trunk with two L2-normalized linear heads (image, caption)."""

    kind = "semantic"

    def __init__(self, cfg: SemanticConfig = SemanticConfig()):
        self.cfg = cfg
        rng = Rng(cfg.seed)
        trunk = [Linear(cfg.voxel_dim, cfg.hidden, rng), LayerNorm(cfg.hidden), SiLU(), Dropout(cfg.dropout)]
        trunk += [ResidualMLPBlock(cfg.hidden, cfg.dropout, rng) for _ in range(cfg.blocks)]
        self.trunk = Sequential(*trunk)
        self.img_head = Sequential(Linear(cfg.hidden, cfg.embed_dim, rng), L2Normalize())
        self.cap_head = Sequential(Linear(cfg.hidden, cfg.embed_dim, rng), L2Normalize())

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in (("trunk", self.trunk), ("img_head", self.img_head), ("cap_head", self.cap_head)):
            out.update({f"{prefix}.{k}": v for k, v in part.params().items()})
        return out

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    def describe(self) -> dict:
        return {"kind": "SemanticExtractor", "trunk": self.trunk.describe(),
                "img_head": self.img_head.describe(), "cap_head": self.cap_head.describe()}

    def forward(self, v, train: bool = False, rng: Rng | None = None):
        """Returns ``((e_img, e_cap), backward)`` where ``backward(g_img, g_cap)``
        gives ``(grad_v, param_grads)``."""
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.cfg.voxel_dim:
            raise ShapeError(f"semantic extractor expects (B, {self.cfg.voxel_dim}) voxels, got {v.shape}")
        h, t_trunk = self.trunk.forward(v, train=train, rng=rng)
        e_img, t_img = self.img_head.forward(h)
        e_cap, t_cap = self.cap_head.forward(h)

        def backward(g_img, g_cap):
            gh_img, p_img = t_img.backward(g_img)
            gh_cap, p_cap = t_cap.backward(g_cap)
            gv, p_trunk = t_trunk.backward(gh_img + gh_cap)
            grads = {f"trunk.{k}": x for k, x in p_trunk.items()}
            grads.update({f"img_head.{k}": x for k, x in p_img.items()})
            grads.update({f"cap_head.{k}": x for k, x in p_cap.items()})
            return gv, grads

        return (e_img, e_cap), backward

    def __call__(self, v):
        v = np.asarray(v, dtype=np.float64)
        single = v.ndim == 1
        (e_img, e_cap), _ = self.forward(v[None] if single else v)
        return (e_img[0], e_cap[0]) if single else (e_img, e_cap)


def se_forward(model: SemanticExtractor, v_semantic):
    return model(v_semantic)


def se_train(model: SemanticExtractor, v_semantic, e_img, e_cap, cfg: TrainConfig = TrainConfig(),
             optimizer=None, start_epoch: int = 0, log: TrainLog | None = None, on_epoch=None):
    """Adam on L_img + L_cap. Logs ``loss``, ``l_img``, ``l_cap`` and the softclip/mse parts."""
    v_semantic = np.asarray(v_semantic, dtype=np.float64)
    e_img = np.asarray(e_img, dtype=np.float64)
    e_cap = np.asarray(e_cap, dtype=np.float64)
    sc = SoftClipConfig(model.cfg.temperature)

    def step(idx, rng):
        (p_img, p_cap), backward = model.forward(v_semantic[idx], train=True, rng=rng)
        l_img, l_cap, g_img, g_cap = semantic_losses(p_img, p_cap, e_img[idx], e_cap[idx], sc, return_grad=True)
        _, grads = backward(g_img, g_cap)
        return {
            "loss": l_img + l_cap, "l_img": l_img, "l_cap": l_cap,
            "softclip_img": softclip_loss(p_img, e_img[idx], sc), "mse_img": mse_loss(p_img, e_img[idx]),
            "softclip_cap": softclip_loss(p_cap, e_cap[idx], sc), "mse_cap": mse_loss(p_cap, e_cap[idx]),
            "grads": grads,
        }

    return run_epochs(step, len(v_semantic), model.params(), cfg, optimizer, start_epoch, log, on_epoch)
