"""Training objectives: latent MSE, Sobel edge loss, SoftCLIP, and their composites.

Each loss takes batched arrays (leading axis = batch) and returns a float, or
``(value, grad_wrt_pred)`` when called with ``return_grad=True``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, conv2d_3x3, conv2d_3x3_adjoint

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()
SOBEL_X.setflags(write=False)
SOBEL_Y.setflags(write=False)
GRAD_EPS = 1e-12


@dataclass(frozen=True)
class SoftClipConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def _check_pair(pred, target, name):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"{name}: pred shape {pred.shape} != target shape {target.shape}")
    if pred.ndim < 1 or pred.shape[0] == 0:
        raise ShapeError(f"{name}: need a non-empty batch, got shape {pred.shape}")
    return pred, target


def mse_loss(pred, target, return_grad: bool = False):
    """Batch mean of the per-sample squared L2 distance, (1/n) sum_i ||pred_i - target_i||^2.

    Summing over a sample's elements puts this term on the same scale as
    :func:`sobel_loss`, which is a squared L2 norm of a whole gradient map.
    """
    pred, target = _check_pair(pred, target, "mse_loss")
    n = pred.shape[0]
    diff = pred - target
    value = float(np.sum(diff * diff) / n)
    if not return_grad:
        return value
    return value, 2.0 * diff / n


def sobel_magnitude(z) -> np.ndarray:
    gx = conv2d_3x3(z, SOBEL_X)
    gy = conv2d_3x3(z, SOBEL_Y)
    return np.sqrt(gx * gx + gy * gy + GRAD_EPS)


def sobel_loss(pred_z, target_z, return_grad: bool = False):
    """Batch mean of the squared L2 distance between Sobel gradient-magnitude maps."""
    pred_z, target_z = _check_pair(pred_z, target_z, "sobel_loss")
    if pred_z.ndim < 3:
        raise ShapeError(f"sobel_loss: need (B, ..., H, W), got {pred_z.shape}")
    n = pred_z.shape[0]
    gx = conv2d_3x3(pred_z, SOBEL_X)
    gy = conv2d_3x3(pred_z, SOBEL_Y)
    s_pred = np.sqrt(gx * gx + gy * gy + GRAD_EPS)
    diff = s_pred - sobel_magnitude(target_z)
    value = float(np.sum(diff * diff) / n)
    if not return_grad:
        return value
    g_s = 2.0 * diff / n
    grad = conv2d_3x3_adjoint(g_s * gx / s_pred, SOBEL_X) + conv2d_3x3_adjoint(g_s * gy / s_pred, SOBEL_Y)
    return value, grad


def structural_loss(pred_z, target_z, return_grad: bool = False, edge_weight: float = 1.0):
    """``mse_loss + edge_weight * sobel_loss`` (unit weight by default)."""
    if not return_grad:
        return mse_loss(pred_z, target_z) + edge_weight * sobel_loss(pred_z, target_z)
    m, gm = mse_loss(pred_z, target_z, return_grad=True)
    s, gs = sobel_loss(pred_z, target_z, return_grad=True)
    return m + edge_weight * s, gm + edge_weight * gs


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softclip_loss(p, t, cfg: SoftClipConfig = SoftClipConfig(), return_grad: bool = False):
    """Soft-target contrastive loss between predictions ``p`` and targets ``t``.

    Row i of the target distribution is softmax(t_i . t_j / T) over j and row i of
    the prediction is softmax(p_i . t_j / T); the loss is the cross-entropy summed
    over all rows. The gradient is with respect to ``p`` only.
    """
    p, t = _check_pair(p, t, "softclip_loss")
    if p.ndim != 2:
        raise ShapeError(f"softclip_loss: need (N, D) batches, got {p.shape}")
    tau = cfg.temperature
    logits_t = t @ t.T / tau
    logits_p = p @ t.T / tau
    if not (np.all(np.isfinite(logits_t)) and np.all(np.isfinite(logits_p))):
        raise FloatingPointError("softclip_loss: non-finite similarities")
    q = np.exp(_log_softmax(logits_t))
    log_pp = _log_softmax(logits_p)
    value = float(-np.sum(q * log_pp))
    if not return_grad:
        return value
    # rows of q sum to 1, so d/dlogits_p = softmax(logits_p) - q
    return value, (np.exp(log_pp) - q) @ t / tau


def semantic_losses(pred_img, pred_cap, true_img, true_cap, cfg: SoftClipConfig = SoftClipConfig(),
                    return_grad: bool = False):
    """(image loss, caption loss), each SoftCLIP + MSE on unit-norm embeddings."""
    parts = []
    for pred, true in ((pred_img, true_img), (pred_cap, true_cap)):
        if return_grad:
            sc, gsc = softclip_loss(pred, true, cfg, return_grad=True)
            ms, gms = mse_loss(pred, true, return_grad=True)
            parts.append((sc + ms, gsc + gms))
        else:
            parts.append(softclip_loss(pred, true, cfg) + mse_loss(pred, true))
    if return_grad:
        (l_img, g_img), (l_cap, g_cap) = parts
        return l_img, l_cap, g_img, g_cap
    return tuple(parts)
