"""Mini-batch Adam loop shared by the three trainable models."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import Adam
from .tensor import Rng

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Empty data or a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 30
    lr: float = 1e-3
    seed: int = 0


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # per-epoch dicts of mean loss components

    def column(self, key: str) -> list[float]:
        return [row[key] for row in self.epochs]

    def to_csv(self) -> str:
        if not self.epochs:
            return "epoch\n"
        keys = [k for k in self.epochs[0] if k != "epoch"]
        lines = ["epoch," + ",".join(keys)]
        for row in self.epochs:
            lines.append(f"{row['epoch']}," + ",".join(repr(float(row[k])) for k in keys))
        return "\n".join(lines) + "\n"


def round_to_float32(arrays) -> None:
    """Round arrays in place to float32-representable values (checkpoint precision)."""
    with np.errstate(over="ignore"):
        for a in arrays:
            a[...] = a.astype(np.float32)


def run_epochs(step: Callable[[np.ndarray, Rng], dict], n: int, params: dict[str, np.ndarray],
               cfg: TrainConfig, optimizer: Adam | None = None, start_epoch: int = 0,
               log_out: TrainLog | None = None, on_epoch: Callable[[int, Adam], None] | None = None):
    """Run epochs ``start_epoch .. cfg.epochs - 1``.

    ``step(batch_indices, rng)`` computes gradients for one mini-batch, returning
    a dict with the scalar ``loss`` (plus optional components) and ``grads``.
    Batch order and dropout masks come from substreams keyed by (seed, epoch), so
    resuming at an epoch boundary reproduces an uninterrupted run exactly. At
    each epoch end parameters and optimizer moments are rounded to float32, the
    precision checkpoints are stored at.
    """
    if n < 1:
        raise TrainingError("empty dataset")
    optimizer = optimizer or Adam(params, lr=cfg.lr)
    log_out = log_out if log_out is not None else TrainLog()
    root = Rng(cfg.seed)
    for epoch in range(start_epoch, cfg.epochs):
        erng = root.child(epoch)
        order = erng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            out = step(idx, erng)
            loss = out["loss"]
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {batches}")
            optimizer.step(out["grads"])
            for k, v in out.items():
                if k != "grads":
                    sums[k] = sums.get(k, 0.0) + float(v)
            batches += 1
        round_to_float32(list(params.values()) + list(optimizer.m.values()) + list(optimizer.v.values()))
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        log_out.epochs.append(row)
        log.debug("epoch %d: %s", epoch, row)
        if on_epoch is not None:
            on_epoch(epoch, optimizer)
    return log_out, optimizer
