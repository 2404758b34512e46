"""Synthetic stimuli, a linear-plus-noise voxel forward model, ROI masks and dataset I/O."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attributes import BACKGROUNDS, GRID, GRID_SIZE, PALETTE, AttributeVector
from .codec import Codec, autokl_encode, read_ppm, write_ppm
from .tensor import Rng, ShapeError, read_vxd, vxd_bytes

# (base rgb, texture amplitude) per background
_BACKGROUND_TINT = (
    (0.45, 0.45, 0.45),
    (0.35, 0.40, 0.55),
    (0.50, 0.42, 0.30),
    (0.30, 0.48, 0.35),
)
_RADIUS = (5.0, 7.5)


def _background(bg: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tint = np.array(_BACKGROUND_TINT[bg])[:, None, None]
    name = BACKGROUNDS[bg]
    if name == "plain":
        tex = np.zeros((size, size))
    elif name == "stripes":
        tex = np.where((yy // 4) % 2 == 0, 0.12, -0.12)
    elif name == "checker":
        tex = np.where(((yy // 8) + (xx // 8)) % 2 == 0, 0.12, -0.12)
    else:
        tex = 0.25 * (yy / (size - 1) - 0.5)
    return np.clip(tint + tex[None], 0.0, 1.0)


def shape_mask(attrs: AttributeVector, size: int = 64) -> np.ndarray:
    """Boolean support of the foreground shape."""
    cell = size / GRID
    cy = (attrs.row + 0.5) * cell - 0.5
    cx = (attrs.col + 0.5) * cell - 0.5
    r = _RADIUS[attrs.scale] * size / 64
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if attrs.shape_id == 0:
        return dy**2 + dx**2 <= r**2
    if attrs.shape_id == 1:
        return np.maximum(np.abs(dy), np.abs(dx)) <= 0.8 * r
    if attrs.shape_id == 2:
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= 0.5 * (dy + r))
    return (np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r)


def gen_stimulus(attrs: AttributeVector, size: int = 64) -> np.ndarray:
    """Deterministic (3, size, size) rendering in [0, 1]."""
    img = _background(attrs.background_id, size)
    mask = shape_mask(attrs, size)
    color = np.array(PALETTE[attrs.color_id])[:, None, None]
    return np.where(mask[None], color, img)


class DatasetError(ValueError):
    pass


# --- ROI masks ---------------------------------------------------------------

SPATIAL, SEMANTIC = "spatial", "semantic"


@dataclass
class RoiMask:
    mask: np.ndarray  # bool volume
    label: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.label not in (SPATIAL, SEMANTIC):
            raise ValueError(f"unknown ROI label {self.label!r}")

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def make_roi_masks(grid: tuple[int, int, int], v_spatial: int, v_semantic: int, rng: Rng) -> tuple[RoiMask, RoiMask]:
    """Disjoint spatial/semantic masks with exact popcounts.

    Voxels are ranked along the posterior-anterior axis (axis 1) with seeded
    jitter; the most posterior ``v_spatial`` become the spatial ROI and the next
    ``v_semantic`` the semantic ROI.
    """
    total = int(np.prod(grid))
    if v_spatial < 1 or v_semantic < 1 or v_spatial + v_semantic > total:
        raise DatasetError(f"ROI sizes {v_spatial}+{v_semantic} do not fit a {grid} grid")
    depth = np.broadcast_to(np.arange(grid[1])[None, :, None], grid).astype(np.float64)
    order = np.argsort(depth.ravel() + 2.0 * rng.uniform((total,)), kind="stable")
    spatial = np.zeros(total, dtype=bool)
    semantic = np.zeros(total, dtype=bool)
    spatial[order[:v_spatial]] = True
    semantic[order[v_spatial:v_spatial + v_semantic]] = True
    return RoiMask(spatial.reshape(grid), SPATIAL), RoiMask(semantic.reshape(grid), SEMANTIC)


def roi_extract(volume, mask: RoiMask) -> np.ndarray:
    """Values of ``volume`` where the mask is set, in C scan order."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.shape != mask.mask.shape:
        raise ShapeError(f"roi_extract: volume {volume.shape} vs mask {mask.mask.shape}")
    return volume[mask.mask]


def roi_scatter(values, mask: RoiMask, fill: float = 0.0) -> np.ndarray:
    """Inverse of :func:`roi_extract`: place values back into a full volume."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (mask.count,):
        raise ShapeError(f"roi_scatter: {values.shape} values for a mask of {mask.count} voxels")
    out = np.full(mask.mask.shape, fill)
    out[mask.mask] = values
    return out


# --- forward model -----------------------------------------------------------

@dataclass
class VoxelRecord:
    v_spatial: np.ndarray
    v_semantic: np.ndarray
    stimulus_id: int
    attrs: AttributeVector


@dataclass
class ForwardModel:
    """Frozen mixing matrices from features to voxels.

    ``w_spatial`` maps the flattened latent to spatial voxels and ``w_semantic``
    maps the concatenated [image embedding; caption embedding] to semantic voxels.
    Entries are N(0, gain^2 / in_dim), so a voxel's signal variance is
    ``gain^2 * mean(feature^2)``.
    """

    w_spatial: np.ndarray
    w_semantic: np.ndarray

    @classmethod
    def create(cls, rng: Rng, v_spatial: int, v_semantic: int, latent_dim: int, embed_dim: int,
               spatial_gain: float = 1.0, semantic_gain: float = 4.0) -> "ForwardModel":
        ws = rng.child(1).randn((v_spatial, latent_dim)) * (spatial_gain / np.sqrt(latent_dim))
        wm = rng.child(2).randn((v_semantic, 2 * embed_dim)) * (semantic_gain / np.sqrt(2 * embed_dim))
        return cls(ws, wm)


def forward_model(image, attrs: AttributeVector, sigma: float, rng: Rng, fm: ForwardModel,
                  codec: Codec, stimulus_id: int | None = None) -> VoxelRecord:
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    z = autokl_encode(image).ravel()
    if z.size != fm.w_spatial.shape[1]:
        raise ShapeError(f"latent has {z.size} values, W_s expects {fm.w_spatial.shape[1]}")
    e = np.concatenate([codec.clip_image_embed(image), codec.clip_text_embed(attrs)])
    if e.size != fm.w_semantic.shape[1]:
        raise ShapeError(f"embeddings have {e.size} values, W_m expects {fm.w_semantic.shape[1]}")
    vs = fm.w_spatial @ z + sigma * rng.randn((fm.w_spatial.shape[0],))
    vm = fm.w_semantic @ e + sigma * rng.randn((fm.w_semantic.shape[0],))
    return VoxelRecord(vs, vm, attrs.index if stimulus_id is None else stimulus_id, attrs)


# --- datasets ----------------------------------------------------------------

@dataclass
class DatasetConfig:
    n_train: int = 800
    n_test: int = 100
    sigma: float = 0.1
    seed: int = 0
    subject: int = 1
    v_spatial: int = 512
    v_semantic: int = 512
    grid: tuple = (12, 12, 8)
    image_size: int = 64
    codec_seed: int = 0

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)

    def validate(self) -> None:
        if self.n_train < 1 or self.n_test < 1:
            raise DatasetError("train and test sizes must be >= 1")
        if self.n_train + self.n_test > GRID_SIZE:
            raise DatasetError(
                f"{self.n_train} train + {self.n_test} test records exceed the {GRID_SIZE} attribute combinations")
        if self.sigma < 0:
            raise DatasetError("sigma must be >= 0")


@dataclass
class Split:
    """Column-stacked records of one split."""

    ids: np.ndarray  # attribute indices (= stimulus ids)
    images: np.ndarray  # (N, 3, S, S)
    latents: np.ndarray  # (N, 3, S/4, S/4)
    e_img: np.ndarray  # (N, D)
    e_cap: np.ndarray  # (N, D)
    volumes: np.ndarray  # (N, *grid)
    v_spatial: np.ndarray  # (N, V_s)
    v_semantic: np.ndarray  # (N, V_m)

    def __len__(self):
        return len(self.ids)

    def attrs(self, i: int) -> AttributeVector:
        return AttributeVector.from_index(int(self.ids[i]))

    def subset(self, idx) -> "Split":
        return Split(**{k: v[idx] for k, v in asdict_shallow(self).items()})


def asdict_shallow(obj) -> dict:
    return {f: getattr(obj, f) for f in obj.__dataclass_fields__}


@dataclass
class Dataset:
    config: DatasetConfig
    train: Split
    test: Split
    masks: tuple[RoiMask, RoiMask]
    codec: Codec = field(repr=False)


def _split_ids(cfg: DatasetConfig) -> tuple[np.ndarray, np.ndarray]:
    # depends on the stimulus seed only, so every subject shares the same test set
    perm = Rng(cfg.seed).child(0).permutation(GRID_SIZE)
    test = np.sort(perm[:cfg.n_test])
    train = perm[cfg.n_test:cfg.n_test + cfg.n_train]
    return train, test


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def _make_split(ids, cfg, codec, fm, masks, subject_rng) -> Split:
    images = np.stack([gen_stimulus(AttributeVector.from_index(int(i)), cfg.image_size) for i in ids])
    latents = autokl_encode(images)
    e_img = codec.clip_image_embed(images)
    e_cap = np.stack([codec.clip_text_embed(AttributeVector.from_index(int(i))) for i in ids])
    spatial, semantic = masks
    volumes = np.empty((len(ids),) + cfg.grid)
    for n, i in enumerate(ids):
        rng = subject_rng.child(int(i))
        rec = forward_model(images[n], AttributeVector.from_index(int(i)), cfg.sigma, rng, fm, codec, int(i))
        vol = roi_scatter(rec.v_spatial, spatial) + roi_scatter(rec.v_semantic, semantic)
        background = ~(spatial.mask | semantic.mask)
        vol[background] = cfg.sigma * rng.randn((int(background.sum()),))
        volumes[n] = vol
    # voxels are stored as float32 on disk; keep the in-memory copy identical
    volumes = _f32(volumes)
    vs = np.stack([roi_extract(v, spatial) for v in volumes]) if len(ids) else np.zeros((0, spatial.count))
    vm = np.stack([roi_extract(v, semantic) for v in volumes]) if len(ids) else np.zeros((0, semantic.count))
    return Split(np.asarray(ids, dtype=np.int64), images, latents, e_img, e_cap, volumes, vs, vm)


def build_dataset(cfg: DatasetConfig) -> Dataset:
    cfg.validate()
    codec = Codec(cfg.codec_seed, cfg.image_size)
    subject_rng = Rng(cfg.seed).child(1000 + cfg.subject)
    latent_dim = int(np.prod(codec.latent_shape))
    fm = ForwardModel.create(subject_rng.child(1), cfg.v_spatial, cfg.v_semantic, latent_dim, codec.embed_dim)
    masks = make_roi_masks(cfg.grid, cfg.v_spatial, cfg.v_semantic, subject_rng.child(2))
    train_ids, test_ids = _split_ids(cfg)
    noise_rng = subject_rng.child(3)
    return Dataset(
        cfg,
        _make_split(train_ids, cfg, codec, fm, masks, noise_rng),
        _make_split(test_ids, cfg, codec, fm, masks, noise_rng),
        masks,
        codec,
    )


def manifest_dict(ds: Dataset) -> dict:
    cfg = ds.config
    records = []
    for split_name, split in (("train", ds.train), ("test", ds.test)):
        for i in split.ids:
            a = AttributeVector.from_index(int(i))
            records.append({
                "id": int(i), "split": split_name, "attrs": a.to_dict(), "caption": a.caption(),
                "stimulus": f"stimuli/{int(i):04d}.ppm", "voxels": f"voxels/{int(i):04d}.vxd",
            })
    return {
        "format": "voxrecon-dataset/1",
        "config": {**asdict(cfg), "grid": list(cfg.grid)},
        "dims": {"v_spatial": cfg.v_spatial, "v_semantic": cfg.v_semantic, "grid": list(cfg.grid),
                 "image": [3, cfg.image_size, cfg.image_size], "latent": list(ds.codec.latent_shape),
                 "embed": ds.codec.embed_dim},
        "masks": "masks.vxd",
        "records": records,
    }


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "stimuli").mkdir(parents=True, exist_ok=True)
    (out / "voxels").mkdir(parents=True, exist_ok=True)
    for split in (ds.train, ds.test):
        for n, i in enumerate(split.ids):
            write_ppm(out / "stimuli" / f"{int(i):04d}.ppm", split.images[n])
            (out / "voxels" / f"{int(i):04d}.vxd").write_bytes(vxd_bytes(split.volumes[n]))
    (out / "masks.vxd").write_bytes(vxd_bytes(np.stack([m.mask for m in ds.masks]).astype(np.float64)))
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest_dict(ds), indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(path) -> Dataset:
    """Load from a dataset directory or its manifest.json.

    Stimuli are re-rendered from the attributes in the manifest (the PPM files are
    8-bit previews); voxel volumes come from the VXD files and the ROI vectors
    are extracted with the stored masks.
    """
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    root = manifest_path.parent
    man = json.loads(manifest_path.read_text())
    cfg = DatasetConfig(**man["config"])
    codec = Codec(cfg.codec_seed, cfg.image_size)
    m = read_vxd(root / man["masks"]).astype(bool)
    masks = (RoiMask(m[0], SPATIAL), RoiMask(m[1], SEMANTIC))
    splits = {}
    for split_name in ("train", "test"):
        recs = [r for r in man["records"] if r["split"] == split_name]
        ids = np.array([r["id"] for r in recs], dtype=np.int64)
        for r in recs:
            if AttributeVector(**r["attrs"]).index != r["id"]:
                raise DatasetError(f"record {r['id']}: attributes do not match id")
        images = np.stack([gen_stimulus(AttributeVector.from_index(int(i)), cfg.image_size) for i in ids])
        volumes = np.stack([read_vxd(root / r["voxels"]) for r in recs])
        splits[split_name] = Split(
            ids, images, autokl_encode(images), codec.clip_image_embed(images),
            np.stack([codec.clip_text_embed(AttributeVector.from_index(int(i))) for i in ids]),
            volumes,
            np.stack([roi_extract(v, masks[0]) for v in volumes]),
            np.stack([roi_extract(v, masks[1]) for v in volumes]),
        )
    return Dataset(cfg, splits["train"], splits["test"], masks, codec)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_stimulus(path) -> np.ndarray:
    return read_ppm(path)
