"""Small conditional noise predictor with one cross-attention layer.

Layout (F = ``features``)::

    z (C, S, S) -> conv -> film(t) -> SiLU = h1 (F, S, S)
    h1 -> avgpool -> conv -> film(t) -> SiLU = h2 (F, S/2, S/2)
    h2 tokens (+ positional) attend over [e_img, e_cap, null]  -> h3 = h2 + attn
    upsample(h3) + h1 -> conv -> film(t) -> SiLU -> conv -> eps_hat (C, S, S)

film(t) scales and shifts each channel by amounts predicted from the time
embedding, ``a * (1 + scale(t)) + shift(t)``, so the gain can change with t.

The learned null token is always attendable; a masked condition token is removed
from the softmax, so masking both leaves only the null token.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .layers import GradTape, AvgPool2x, Conv2d, Linear, NearestUpsample2x, SiLU
from .tensor import Rng, ShapeError

CONDITION_MODES = {
    "both": (True, True),
    "image-only": (True, False),
    "caption-only": (False, True),
    "none": (False, False),
}


@dataclass
class DenoiserConfig:
    latent_channels: int = 3
    latent_size: int = 16
    features: int = 32
    embed_dim: int = 64
    attn_dim: int = 32
    time_dim: int = 32
    cond_drop: float = 0.15  # per-token probability of training with the token masked
    latent_shift: float = 0.0  # diffusion runs on (z - shift) * scale
    latent_scale: float = 1.0
    seed: int = 0


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def film_grads(gm, a, scale):
    """Backward of ``m = a * (1 + scale) + shift`` with per-channel scale/shift: (g_scale, g_shift, g_a)."""
    return (gm * a).sum(axis=(2, 3)), gm.sum(axis=(2, 3)), gm * (1 + scale)


def _softmax_masked(logits, keep):
    shifted = np.where(keep, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


class ToyDenoiser:
    kind = "denoiser"

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        if cfg.latent_size % 2:
            raise ValueError("latent size must be even")
        self.cfg = cfg
        rng = Rng(cfg.seed)
        c, f, a, d = cfg.latent_channels, cfg.features, cfg.attn_dim, cfg.embed_dim
        self.time1 = Linear(cfg.time_dim, f, rng)
        self.time2 = Linear(f, 6 * f, rng)  # scale and shift for three feature maps
        self.conv_in = Conv2d(c, f, rng)
        self.conv_mid = Conv2d(f, f, rng)
        self.conv_up = Conv2d(f, f, rng)
        self.conv_out = Conv2d(f, c, rng)
        n_tok = (cfg.latent_size // 2) ** 2
        self.pos = rng.randn((n_tok, f)) * 0.02
        self.wq = rng.randn((f, a)) / math.sqrt(f)
        self.wk = rng.randn((d, a)) / math.sqrt(d)
        self.wv = rng.randn((d, a)) / math.sqrt(d)
        self.wo = rng.randn((a, f)) / math.sqrt(a)
        self.null = rng.randn((d,)) / math.sqrt(d)
        self._sublayers = {"time1": self.time1, "time2": self.time2, "conv_in": self.conv_in,
                           "conv_mid": self.conv_mid, "conv_up": self.conv_up, "conv_out": self.conv_out}

    @property
    def latent_shape(self):
        return (self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._sublayers.items():
            out.update({f"{name}.{k}": v for k, v in layer.params().items()})
        out.update({"attn.pos": self.pos, "attn.wq": self.wq, "attn.wk": self.wk, "attn.wv": self.wv,
                    "attn.wo": self.wo, "attn.null": self.null})
        return out

    def config_dict(self) -> dict:
        return asdict(self.cfg)

    def describe(self) -> dict:
        out = {"kind": "ToyDenoiser"}
        out.update({name: layer.describe() for name, layer in self._sublayers.items()})
        out["attn"] = {"kind": "CrossAttention", "dim": self.cfg.attn_dim, "tokens": ["e_img", "e_cap", "null"]}
        return out

    @staticmethod
    def cond_tokens(e_img, e_cap, keep_img, keep_cap):
        """Stack image/caption embeddings into (B, 2, D) tokens with (B, 2) keep flags."""
        e_img = np.atleast_2d(np.asarray(e_img, dtype=np.float64))
        e_cap = np.atleast_2d(np.asarray(e_cap, dtype=np.float64))
        b = e_img.shape[0]
        keep = np.stack([np.broadcast_to(keep_img, (b,)), np.broadcast_to(keep_cap, (b,))], axis=1)
        return np.stack([e_img, e_cap], axis=1), keep

    def forward(self, z, t, cond, keep):
        """Noise estimate for latents ``z`` (B, C, S, S) at integer steps ``t`` (B,).

        ``cond`` (B, K, D) are condition tokens and ``keep`` (B, K) says which of
        them may be attended to; the null token is appended and always kept.
        Returns ``(eps_hat, tape)``; the tape's backward gives
        ``({"z": ..., "cond": ...}, param_grads)``.
        """
        cfg = self.cfg
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 4 or z.shape[1:] != self.latent_shape:
            raise ShapeError(f"denoiser expects (B, {self.latent_shape}) latents, got {z.shape}")
        b = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        cond = np.asarray(cond, dtype=np.float64)
        keep = np.asarray(keep, dtype=bool)
        if cond.ndim != 3 or cond.shape[0] != b or cond.shape[2] != cfg.embed_dim or keep.shape != cond.shape[:2]:
            raise ShapeError(f"condition tokens {cond.shape} / keep {keep.shape} do not match batch {b}")
        tokens = np.concatenate([cond, np.broadcast_to(self.null, (b, 1, cfg.embed_dim))], axis=1)
        keep = np.concatenate([keep, np.ones((b, 1), dtype=bool)], axis=1)
        f, s = cfg.features, cfg.latent_size
        silu = SiLU()

        temb = timestep_embedding(t, cfg.time_dim)
        t1, tape_t1 = self.time1.forward(temb)
        t1s, tape_t1s = silu.forward(t1)
        tb, tape_t2 = self.time2.forward(t1s)
        s1, b1, s2, b2, s4, b4 = (tb[:, i * f:(i + 1) * f, None, None] for i in range(6))

        a1, tape_in = self.conv_in.forward(z)
        h1, tape_h1 = silu.forward(a1 * (1 + s1) + b1)
        d, tape_pool = AvgPool2x().forward(h1)
        a2, tape_mid = self.conv_mid.forward(d)
        h2, tape_h2 = silu.forward(a2 * (1 + s2) + b2)

        x = h2.reshape(b, f, -1).transpose(0, 2, 1)  # (B, T, F)
        xq = x + self.pos
        q = xq @ self.wq
        k = tokens @ self.wk
        v = tokens @ self.wv
        scale = 1.0 / math.sqrt(cfg.attn_dim)
        p = _softmax_masked(q @ k.transpose(0, 2, 1) * scale, keep[:, None, :])
        o = p @ v
        attn = o @ self.wo
        h3 = h2 + attn.transpose(0, 2, 1).reshape(h2.shape)

        u, tape_up = NearestUpsample2x().forward(h3)
        a4, tape_upc = self.conv_up.forward(u + h1)
        h4, tape_h4 = silu.forward(a4 * (1 + s4) + b4)
        eps, tape_out = self.conv_out.forward(h4)

        def backward(g):
            grads = {}

            def put(prefix, sub):
                for name, val in sub.items():
                    key = f"{prefix}.{name}"
                    grads[key] = grads[key] + val if key in grads else val

            gh4, sub = tape_out.backward(g)
            put("conv_out", sub)
            gm4, _ = tape_h4.backward(gh4)
            gs4, gb4, ga4 = film_grads(gm4, a4, s4)
            gs, sub = tape_upc.backward(ga4)
            put("conv_up", sub)
            gh1 = gs.copy()
            gh3, _ = tape_up.backward(gs)

            gh2 = gh3.copy()
            gattn = gh3.reshape(b, f, -1).transpose(0, 2, 1)
            grads["attn.wo"] = np.einsum("bta,btf->af", o, gattn)
            go = gattn @ self.wo.T
            gp = go @ v.transpose(0, 2, 1)
            gv = p.transpose(0, 2, 1) @ go
            glog = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            gq = glog @ k
            gk = glog.transpose(0, 2, 1) @ q
            grads["attn.wq"] = np.einsum("btf,bta->fa", xq, gq)
            grads["attn.wk"] = np.einsum("bkd,bka->da", tokens, gk)
            grads["attn.wv"] = np.einsum("bkd,bka->da", tokens, gv)
            gx = gq @ self.wq.T
            grads["attn.pos"] = gx.sum(axis=0)
            g_tokens = gk @ self.wk.T + gv @ self.wv.T
            grads["attn.null"] = g_tokens[:, -1].sum(axis=0)
            gh2 += gx.transpose(0, 2, 1).reshape(h2.shape)

            gm2, _ = tape_h2.backward(gh2)
            gs2, gb2, ga2 = film_grads(gm2, a2, s2)
            gd, sub = tape_mid.backward(ga2)
            put("conv_mid", sub)
            gh1 += tape_pool.backward(gd)[0]
            gm1, _ = tape_h1.backward(gh1)
            gs1, gb1, ga1 = film_grads(gm1, a1, s1)
            gz, sub = tape_in.backward(ga1)
            put("conv_in", sub)

            gt1s, sub = tape_t2.backward(np.concatenate([gs1, gb1, gs2, gb2, gs4, gb4], axis=1))
            put("time2", sub)
            gt1, _ = tape_t1s.backward(gt1s)
            _, sub = tape_t1.backward(gt1)
            put("time1", sub)
            return {"z": gz, "cond": g_tokens[:, :-1]}, grads

        return eps, GradTape(backward, eps.shape, "ToyDenoiser")

    def __call__(self, z, t, e_img, e_cap, mode: str = "both"):
        keep_img, keep_cap = CONDITION_MODES[mode]
        cond, keep = self.cond_tokens(e_img, e_cap, keep_img, keep_cap)
        eps, _ = self.forward(z, t, cond, keep)
        return eps
