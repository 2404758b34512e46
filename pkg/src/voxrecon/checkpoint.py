"""Model checkpoints: a JSON header followed by one VXD payload per tensor.

Layout::

    b"VXCK" | u32 LE header length | UTF-8 JSON header | VXD tensor 0 | VXD tensor 1 | ...

The header lists the model kind, its config, the layer description, and the
name and shape of every tensor in payload order. Optimizer moments are stored
as extra tensors (``adam.m.*``, ``adam.v.*``) so training can resume.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, ToyDenoiser
from .layers import Adam
from .semantic import SemanticConfig, SemanticExtractor
from .structural import StructuralConfig, StructuralGenerator
from .tensor import VXDFormatError, parse_vxd, vxd_bytes

MAGIC = b"VXCK"
FORMAT_VERSION = 1

MODEL_KINDS = {
    "structural": (StructuralGenerator, StructuralConfig),
    "semantic": (SemanticExtractor, SemanticConfig),
    "denoiser": (ToyDenoiser, DenoiserConfig),
}


class CheckpointError(ValueError):
    pass


def build_model(kind: str, config: dict):
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model kind {kind!r}")
    cls, cfg_cls = MODEL_KINDS[kind]
    try:
        cfg = cfg_cls(**config)
    except TypeError as exc:
        raise CheckpointError(f"bad {kind} config: {exc}") from None
    return cls(cfg)


def checkpoint_bytes(model, epoch: int = 0, optimizer: Adam | None = None, extra: dict | None = None) -> bytes:
    tensors = dict(model.params())
    header = {
        "format": "voxrecon-checkpoint",
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "config": model.config_dict(),
        "layers": model.describe(),
        "epoch": int(epoch),
        "extra": extra or {},
    }
    if optimizer is not None:
        header["adam"] = {"t": optimizer.t, "lr": optimizer.lr, "betas": list(optimizer.betas), "eps": optimizer.eps}
        tensors.update(optimizer.state())
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()]
    raw = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(raw)) + raw + b"".join(vxd_bytes(v) for v in tensors.values())


def save_checkpoint(path, model, epoch: int = 0, optimizer: Adam | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, epoch, optimizer, extra))
    return path


def parse_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Split a checkpoint into its header dict and named tensors."""
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8:8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    off = 8 + n
    tensors = {}
    for spec in header.get("tensors", []):
        size = 8 + 4 * len(spec["shape"]) + 4 * math.prod(spec["shape"])
        try:
            arr = parse_vxd(buf[off:off + size])
        except VXDFormatError as exc:
            raise CheckpointError(f"tensor {spec['name']}: {exc}") from None
        if list(arr.shape) != spec["shape"]:
            raise CheckpointError(f"tensor {spec['name']}: shape {arr.shape} != header {spec['shape']}")
        tensors[spec["name"]] = arr
        off += size
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after the last tensor")
    return header, tensors


def load_checkpoint(path):
    """Returns ``(model, header, optimizer)``; ``optimizer`` is None when no state was saved."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    header, tensors = parse_checkpoint(path.read_bytes())
    model = build_model(header["kind"], header["config"])
    params = model.params()
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing}")
    for k, p in params.items():
        if p.shape != tensors[k].shape:
            raise CheckpointError(f"parameter {k}: shape {tensors[k].shape} != model {p.shape}")
        p[...] = tensors[k]
    optimizer = None
    if "adam" in header:
        a = header["adam"]
        optimizer = Adam(params, lr=a["lr"], betas=tuple(a["betas"]), eps=a["eps"])
        optimizer.load_state(tensors, a["t"])
    return model, header, optimizer


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
