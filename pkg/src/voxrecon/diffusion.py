"""Noise schedule, strength-controlled initialization, ancestral sampling and the
end-to-end reconstruction loop.

Timestep convention: schedule indices run 0..N-1. A strength ``s`` gives
``tau = N - floor(N * s)`` denoising iterations; the prior is noised to index
``tau - 1`` and the sampler walks ``t = tau - 1, ..., 0``. With ``tau == 0`` the
prior is decoded untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .codec import autokl_decode
from .denoiser import CONDITION_MODES, ToyDenoiser
from .tensor import NonFiniteError, Rng, ShapeError
from .training import TrainConfig, TrainLog, run_epochs

INIT_MODES = ("structural-prior", "gaussian")


class NoiseSchedule:
    """Per-step variances ``beta`` with ``alpha = 1 - beta`` and running product ``alpha_bar``."""

    def __init__(self, beta):
        beta = np.array(beta, dtype=np.float64).reshape(-1)
        if beta.size < 1:
            raise ValueError("schedule needs at least one step")
        if np.any(beta < 0) or np.any(beta >= 1) or not np.all(np.isfinite(beta)):
            raise ValueError("beta must lie in [0, 1)")
        self.beta = beta
        self.alpha = 1.0 - beta
        self.alpha_bar = np.cumprod(self.alpha)
        for a in (self.beta, self.alpha, self.alpha_bar):
            a.setflags(write=False)

    @property
    def N(self) -> int:
        return self.beta.size

    def __repr__(self):
        return f"NoiseSchedule(N={self.N}, beta=[{self.beta[0]:g} .. {self.beta[-1]:g}])"


def make_schedule(N: int = 50, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` over ``N`` steps."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, N))


def tau_from_strength(N: int, s: float) -> int:
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0 < s <= 1:
        raise ValueError(f"strength must be in (0, 1], got {s}")
    return min(N - math.floor(N * s), N - 1)


def _check_t(t, schedule: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < schedule.N:
        raise ValueError(f"timestep {t} outside [0, {schedule.N - 1}]")
    return t


def add_noise(z_prior, tau: int, schedule: NoiseSchedule, rng: Rng | None = None, eps=None) -> np.ndarray:
    """One-step forward marginal ``sqrt(abar) z + sqrt(1 - abar) eps`` at index ``tau``."""
    tau = _check_t(tau, schedule)
    z = np.asarray(z_prior, dtype=np.float64)
    if eps is None:
        if rng is None:
            raise ValueError("add_noise needs an rng or explicit eps")
        eps = rng.randn(z.shape)
    elif np.shape(eps) != z.shape:
        raise ShapeError(f"noise shape {np.shape(eps)} != latent shape {z.shape}")
    ab = schedule.alpha_bar[tau]
    return math.sqrt(ab) * z + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def predict_noise(denoiser: ToyDenoiser, z_t, t, e_img, e_cap, mode: str = "both") -> np.ndarray:
    if mode not in CONDITION_MODES:
        raise ValueError(f"unknown conditioning mode {mode!r}; expected one of {sorted(CONDITION_MODES)}")
    z_t = np.asarray(z_t, dtype=np.float64)
    if np.ndim(t) == 0:
        t = np.full(z_t.shape[0], int(t))
    if np.any(np.asarray(t) < 0):
        raise ValueError(f"negative timestep in {t}")
    return denoiser(z_t, t, e_img, e_cap, mode)


def denoise_step(z_t, t: int, eps_hat, schedule: NoiseSchedule, rng: Rng | None = None,
                 noise=None) -> np.ndarray:
    """One ancestral step from index ``t``; no sampling noise is added at ``t == 0``.

    ``noise`` may supply the standard-normal draw explicitly instead of ``rng``.
    """
    t = _check_t(t, schedule)
    z_t = np.asarray(z_t, dtype=np.float64)
    beta = schedule.beta[t]
    if beta == 0.0:
        return z_t.copy()
    one_minus_ab = 1.0 - schedule.alpha_bar[t]
    if one_minus_ab <= 0.0:
        raise FloatingPointError(f"alpha_bar[{t}] == 1 with beta > 0")
    mean = (z_t - beta / math.sqrt(one_minus_ab) * np.asarray(eps_hat)) / math.sqrt(schedule.alpha[t])
    if t == 0:
        return mean
    if noise is None:
        if rng is None:
            raise ValueError("denoise_step needs an rng or explicit noise for t > 0")
        noise = rng.randn(z_t.shape)
    return mean + math.sqrt(beta) * noise


def normalize_latent(denoiser: ToyDenoiser, z):
    return (np.asarray(z, dtype=np.float64) - denoiser.cfg.latent_shift) * denoiser.cfg.latent_scale


def denormalize_latent(denoiser: ToyDenoiser, z):
    return np.asarray(z, dtype=np.float64) / denoiser.cfg.latent_scale + denoiser.cfg.latent_shift


def denoiser_train(model: ToyDenoiser, z_img, e_img, e_cap, schedule: NoiseSchedule,
                   cfg: TrainConfig = TrainConfig(), optimizer=None, start_epoch: int = 0,
                   log: TrainLog | None = None, on_epoch=None):
    """Epsilon-prediction training with per-token condition dropout.

    The loss is the mean squared error per latent element. Each condition token
    is masked independently with probability ``model.cfg.cond_drop`` so the
    network also learns the partially and fully unconditioned cases.
    """
    z0 = normalize_latent(model, z_img)
    e_img = np.asarray(e_img, dtype=np.float64)
    e_cap = np.asarray(e_cap, dtype=np.float64)
    if not len(z0) == len(e_img) == len(e_cap):
        raise ShapeError(f"{len(z0)} latents, {len(e_img)} image and {len(e_cap)} caption embeddings")
    drop = model.cfg.cond_drop

    def step(idx, rng):
        b = len(idx)
        t = rng.integers(0, schedule.N, (b,))
        eps = rng.randn((b,) + z0.shape[1:])
        ab = schedule.alpha_bar[t][:, None, None, None]
        z_t = np.sqrt(ab) * z0[idx] + np.sqrt(1.0 - ab) * eps
        keep = rng.uniform((b, 2)) >= drop
        cond = np.stack([e_img[idx], e_cap[idx]], axis=1)
        eps_hat, tape = model.forward(z_t, t, cond, keep)
        diff = eps_hat - eps
        loss = float(np.mean(diff * diff))
        _, grads = tape.backward(2.0 * diff / diff.size)
        return {"loss": loss, "grads": grads}

    return run_epochs(step, len(z0), model.params(), cfg, optimizer, start_epoch, log, on_epoch)


def eval_noise_loss(model: ToyDenoiser, z_img, e_img, e_cap, schedule: NoiseSchedule, seed: int = 0) -> float:
    """Held-out epsilon-prediction loss with fixed (seeded) timesteps and noise."""
    rng = Rng(seed)
    z0 = normalize_latent(model, z_img)
    b = len(z0)
    t = rng.integers(0, schedule.N, (b,))
    eps = rng.randn(z0.shape)
    ab = schedule.alpha_bar[t][:, None, None, None]
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    cond, keep = model.cond_tokens(e_img, e_cap, True, True)
    eps_hat, _ = model.forward(z_t, t, cond, keep)
    return float(np.mean((eps_hat - eps) ** 2))


@dataclass
class ReconstructionConfig:
    strength: float = 0.75
    condition: str = "both"
    init: str = "structural-prior"
    n_steps: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.2

    def __post_init__(self):
        if not 0 < self.strength <= 1:
            raise ValueError(f"strength must be in (0, 1], got {self.strength}")
        if self.condition not in CONDITION_MODES:
            raise ValueError(f"unknown conditioning mode {self.condition!r}")
        if self.init not in INIT_MODES:
            raise ValueError(f"unknown init mode {self.init!r}; expected one of {INIT_MODES}")

    @property
    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.n_steps, self.beta_start, self.beta_end)

    @property
    def tau(self) -> int:
        return tau_from_strength(self.n_steps, self.strength)


@dataclass
class Models:
    structural: object
    semantic: object
    denoiser: ToyDenoiser


@dataclass
class Reconstruction:
    images: np.ndarray  # (B, 3, H, W) in [0, 1]
    latents: np.ndarray  # final latents, codec space
    prior: np.ndarray  # structural prior z'
    e_img: np.ndarray  # predicted embeddings
    e_cap: np.ndarray
    keep: tuple  # which condition tokens the sampler could attend to
    iterations: int
    tau: int
    extra: dict = field(default_factory=dict)


def reconstruct(v_spatial, v_semantic, models: Models, cfg: ReconstructionConfig, rng: Rng,
                keys=None) -> Reconstruction:
    """Voxels -> images for a batch (or a single record given 1-D vectors).

    Sampling noise for item ``i`` comes from ``rng.child(keys[i])`` (default
    ``keys = range(B)``), so an item's output does not depend on its batch mates.
    """
    v_spatial = np.asarray(v_spatial, dtype=np.float64)
    v_semantic = np.asarray(v_semantic, dtype=np.float64)
    single = v_spatial.ndim == 1
    if single:
        v_spatial, v_semantic = v_spatial[None], v_semantic[None]
    b = len(v_spatial)
    if len(v_semantic) != b:
        raise ShapeError(f"{b} spatial vs {len(v_semantic)} semantic voxel rows")
    keys = list(range(b)) if keys is None else [int(k) for k in keys]
    if len(keys) != b:
        raise ValueError(f"{len(keys)} rng keys for {b} items")
    item_rngs = [rng.child(k) for k in keys]

    z_prior = models.structural(v_spatial)
    e_img, e_cap = models.semantic(v_semantic)
    den = models.denoiser
    schedule = cfg.schedule
    keep = CONDITION_MODES[cfg.condition]

    def draw():
        return np.stack([r.randn(z_prior.shape[1:]) for r in item_rngs])

    if cfg.init == "gaussian":
        start, tau = schedule.N - 1, cfg.tau
        z = draw()
    else:
        tau = cfg.tau
        start = tau - 1
        z = add_noise(normalize_latent(den, z_prior), start, schedule, eps=draw()) if tau > 0 else None

    iterations = 0
    if z is None:
        z_final = z_prior
    else:
        for t in range(start, -1, -1):
            eps_hat = predict_noise(den, z, t, e_img, e_cap, cfg.condition)
            z = denoise_step(z, t, eps_hat, schedule, noise=draw() if t > 0 else None)
            iterations += 1
        z_final = denormalize_latent(den, z)
    if not np.all(np.isfinite(z_final)):
        raise NonFiniteError("sampler produced non-finite latents")
    images = autokl_decode(z_final)
    out = Reconstruction(images, z_final, z_prior, e_img, e_cap, keep, iterations, tau)
    if single:
        out.images, out.latents, out.prior = images[0], z_final[0], z_prior[0]
        out.e_img, out.e_cap = e_img[0], e_cap[0]
    return out
