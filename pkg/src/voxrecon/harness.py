"""Experiment configuration and the command implementations behind the CLI.

An experiment directory holds everything a run produces::

    <out>/config.json
    <out>/dataset/                    manifest.json, stimuli/, voxels/, masks.vxd
    <out>/checkpoints/<which>.ckpt
    <out>/logs/<which>_loss.csv
    <out>/recon/<mode>/NNNN.ppm       + NNNN.json sidecar, conditioning.vxd
    <out>/eval/<mode>/                items.csv, summary.csv, summary.md
    <out>/ablation/                   ablation.csv, ablation.md
    <out>/interpret/<which>_contrib.vxd + .csv
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .codec import LATENT_FACTOR, read_ppm, write_ppm
from .denoiser import DenoiserConfig, ToyDenoiser
from .diffusion import Models, ReconstructionConfig, denoiser_train, make_schedule, reconstruct
from .metrics import MetricReport, evaluate, markdown_table, summary_csv
from .semantic import SemanticConfig, SemanticExtractor, se_train
from .structural import StructuralConfig, StructuralGenerator, sg_train
from .synth import Dataset, DatasetConfig, RoiMask, build_dataset, load_dataset, roi_scatter, save_dataset
from .tensor import Rng, read_vxd, write_vxd
from .training import TrainConfig, TrainLog

log = logging.getLogger(__name__)

MODEL_NAMES = ("structural", "semantic", "denoiser")

# mode -> (conditioning tokens, initialization); fixed order of the ablation table
ABLATION_MODES = {
    "full": ("both", "structural-prior"),
    "only_z": ("none", "structural-prior"),
    "no_ecap": ("image-only", "structural-prior"),
    "no_eimg": ("caption-only", "structural-prior"),
    "no_z": ("both", "gaussian"),
}
ABLATION_NOTES = {
    "full": "structural prior + image and caption tokens",
    "only_z": "structural prior only, both condition tokens masked",
    "no_ecap": "caption token masked",
    "no_eimg": "image token masked",
    "no_z": "Gaussian initialization instead of the structural prior",
}

# Rng child keys for the independent streams derived from the experiment seed
SAMPLER_STREAM = 7


class ConfigError(ValueError):
    """Invalid or unknown configuration values (exit code 2)."""


class MissingArtifactError(FileNotFoundError):
    """A dataset, checkpoint or reconstruction the command needs is absent (exit code 3)."""


# fields fixed by the dataset or computed at train time; not settable in a config
DERIVED_FIELDS = {
    "dataset": ("seed",),
    "structural": ("seed", "voxel_dim", "latent_channels", "latent_size"),
    "semantic": ("seed", "voxel_dim", "embed_dim"),
    "denoiser": ("seed", "latent_channels", "latent_size", "embed_dim", "latent_shift", "latent_scale"),
}
SECTION_TYPES = {"dataset": DatasetConfig, "structural": StructuralConfig, "semantic": SemanticConfig,
                 "denoiser": DenoiserConfig}


def _section_defaults(section: str) -> dict:
    cls = SECTION_TYPES[section]
    return {f.name: f.default for f in fields(cls) if f.name not in DERIVED_FIELDS[section]}


@dataclass
class TrainSettings:
    structural: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50, batch_size=30, lr=1e-3))
    semantic: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=50, batch_size=30, lr=1e-3))
    denoiser: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30, batch_size=30, lr=1e-3))


@dataclass
class ScheduleSettings:
    n_steps: int = 50
    beta_start: float = 1e-3
    beta_end: float = 0.2


@dataclass
class ExperimentConfig:
    """Everything a run depends on. Every seed in the run derives from ``seed``."""

    seed: int = 0
    out: str = "runs/default"
    mode: str = "full"
    strength: float = 0.75
    dataset: dict = field(default_factory=lambda: _section_defaults("dataset"))
    structural: dict = field(default_factory=lambda: _section_defaults("structural"))
    semantic: dict = field(default_factory=lambda: _section_defaults("semantic"))
    denoiser: dict = field(default_factory=lambda: _section_defaults("denoiser"))
    training: TrainSettings = field(default_factory=TrainSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)

    def __post_init__(self):
        if self.mode not in ABLATION_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {list(ABLATION_MODES)}")
        if not 0 < self.strength <= 1:
            raise ConfigError(f"strength must be in (0, 1], got {self.strength}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        self.dataset = {**_section_defaults("dataset"), **self.dataset}
        self.dataset["grid"] = list(self.dataset["grid"])

    # typed views -----------------------------------------------------------

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(**{**self.dataset, "grid": tuple(self.dataset["grid"])}, seed=self.seed)

    def structural_config(self) -> StructuralConfig:
        d = self.dataset_config()
        return StructuralConfig(**self.structural, voxel_dim=d.v_spatial, latent_size=d.image_size // LATENT_FACTOR,
                                seed=self.seed)

    def semantic_config(self) -> SemanticConfig:
        return SemanticConfig(**self.semantic, voxel_dim=self.dataset_config().v_semantic, seed=self.seed)

    def denoiser_config(self, latent_shift=0.0, latent_scale=1.0) -> DenoiserConfig:
        return DenoiserConfig(**self.denoiser, latent_size=self.dataset_config().image_size // LATENT_FACTOR,
                              seed=self.seed, latent_shift=latent_shift, latent_scale=latent_scale)

    def train_config(self, which: str) -> TrainConfig:
        t = getattr(self.training, which)
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, seed=self.seed)

    def reconstruction_config(self, mode: str | None = None) -> ReconstructionConfig:
        cond, init = ABLATION_MODES[mode or self.mode]
        s = self.schedule
        return ReconstructionConfig(self.strength, cond, init, s.n_steps, s.beta_start, s.beta_end)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    # JSON ------------------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in MODEL_NAMES:
            d["training"][name].pop("seed")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        _reject_unknown(d, {f.name for f in fields(cls)}, "config")
        for key in SECTION_TYPES:
            allowed = _section_defaults(key)
            if key in d:
                if not isinstance(d[key], dict):
                    raise ConfigError(f"config.{key} must be an object")
                _reject_unknown(d[key], set(allowed), f"config.{key}")
                d[key] = {**allowed, **d[key]}
        if "training" in d:
            tr = d["training"]
            _reject_unknown(tr, set(MODEL_NAMES), "config.training")
            defaults = TrainSettings()
            parts = {}
            for name in MODEL_NAMES:
                sub = tr.get(name, {})
                _reject_unknown(sub, {"epochs", "batch_size", "lr"}, f"config.training.{name}")
                base = asdict(getattr(defaults, name))
                base.pop("seed")
                parts[name] = TrainConfig(**{**base, **sub})
            d["training"] = TrainSettings(**parts)
        if "schedule" in d:
            _reject_unknown(d["schedule"], {f.name for f in fields(ScheduleSettings)}, "config.schedule")
            d["schedule"] = ScheduleSettings(**d["schedule"])
        try:
            cfg = cls(**d)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    def validate(self) -> None:
        """Construct every typed view once so bad values fail early."""
        try:
            self.dataset_config().validate()
            self.structural_config()
            self.semantic_config()
            self.denoiser_config()
            make_schedule(self.schedule.n_steps, self.schedule.beta_start, self.schedule.beta_end)
            for name in MODEL_NAMES:
                t = self.train_config(name)
                if t.epochs < 0 or t.batch_size < 1 or not t.lr > 0:
                    raise ConfigError(f"bad training settings for {name}: {t}")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def load_config(path=None, seed=None, out=None, mode=None) -> ExperimentConfig:
    """Read a config file (or defaults) and apply command-line overrides."""
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(f"config file not found: {p}")
        d = json.loads(p.read_text()) if p.read_text().strip() else {}
        cfg = ExperimentConfig.from_json(json.dumps(d))
    else:
        cfg = ExperimentConfig()
    d = cfg.to_dict()
    for key, val in (("seed", seed), ("out", out), ("mode", mode)):
        if val is not None:
            d[key] = val
    return ExperimentConfig.from_dict(d)


# --- paths -------------------------------------------------------------------

def dataset_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "dataset"


def checkpoint_path(cfg: ExperimentConfig, which: str) -> Path:
    return cfg.out_dir / "checkpoints" / f"{which}.ckpt"


def recon_dir(cfg: ExperimentConfig, mode: str) -> Path:
    return cfg.out_dir / "recon" / mode


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}")
    return path


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    _require(dataset_dir(cfg) / "manifest.json", "dataset manifest (run `synth` first)")
    return load_dataset(dataset_dir(cfg))


# --- commands ----------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig) -> Path:
    dcfg = cfg.dataset_config()
    dcfg.validate()
    ds = build_dataset(dcfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    (cfg.out_dir / "config.json").write_text(cfg.to_json())
    path = save_dataset(ds, dataset_dir(cfg))
    log.info("wrote %d train + %d test records to %s", len(ds.train), len(ds.test), path.parent)
    return path


def _new_model(cfg: ExperimentConfig, which: str, ds: Dataset):
    if which == "structural":
        return StructuralGenerator(cfg.structural_config())
    if which == "semantic":
        return SemanticExtractor(cfg.semantic_config())
    z = ds.train.latents
    # diffusion runs on standardized latents; stats are rounded to float32 like every stored value
    shift = float(np.float32(z.mean()))
    scale = float(np.float32(1.0 / z.std()))
    return ToyDenoiser(cfg.denoiser_config(shift, scale))


def _read_log(path: Path) -> TrainLog:
    lines = path.read_text().strip().splitlines()
    keys = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {"epoch": int(vals[0])}
        row.update({k: float(v) for k, v in zip(keys[1:], vals[1:])})
        rows.append(row)
    return TrainLog(rows)


def cmd_train(cfg: ExperimentConfig, which: str, resume: bool = False) -> Path:
    """Train one model and write its checkpoint plus loss-curve CSV.

    With ``resume`` an existing checkpoint (and its optimizer state) is loaded and
    training continues from the next epoch up to the configured epoch count.
    """
    if which not in MODEL_NAMES:
        raise ConfigError(f"unknown model {which!r}; expected one of {MODEL_NAMES}")
    ds = _load_dataset(cfg)
    tcfg = cfg.train_config(which)
    ckpt = checkpoint_path(cfg, which)
    log_path = cfg.out_dir / "logs" / f"{which}_loss.csv"
    start, optimizer, train_log = 0, None, TrainLog()
    if resume:
        model, header, optimizer = load_checkpoint(_require(ckpt, f"{which} checkpoint to resume"))
        start = header["epoch"]
        if log_path.exists():
            train_log = _read_log(log_path)
            train_log.epochs = train_log.epochs[:start]
    else:
        model = _new_model(cfg, which, ds)

    def on_epoch(epoch, opt):
        save_checkpoint(ckpt, model, epoch + 1, opt, {"which": which, "train": asdict(tcfg)})

    tr = ds.train
    if which == "structural":
        train_log, optimizer = sg_train(model, tr.v_spatial, tr.latents, tcfg, optimizer, start, train_log, on_epoch)
    elif which == "semantic":
        train_log, optimizer = se_train(model, tr.v_semantic, tr.e_img, tr.e_cap, tcfg, optimizer, start,
                                        train_log, on_epoch)
    else:
        sched = make_schedule(cfg.schedule.n_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
        train_log, optimizer = denoiser_train(model, tr.latents, tr.e_img, tr.e_cap, sched, tcfg, optimizer,
                                              start, train_log, on_epoch)
    if start >= tcfg.epochs or not ckpt.exists():
        on_epoch(max(start, tcfg.epochs) - 1, optimizer)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text(train_log.to_csv())
    return ckpt


def load_models(cfg: ExperimentConfig) -> tuple[Models, dict[str, str]]:
    models, hashes = {}, {}
    for which in MODEL_NAMES:
        path = _require(checkpoint_path(cfg, which), f"{which} checkpoint (run `train {which}` first)")
        models[which], _, _ = load_checkpoint(path)
        hashes[which] = file_sha256(path)
    return Models(models["structural"], models["semantic"], models["denoiser"]), hashes


def run_reconstruction(cfg: ExperimentConfig, ds: Dataset, models: Models, mode: str):
    rcfg = cfg.reconstruction_config(mode)
    rng = Rng(cfg.seed).child(SAMPLER_STREAM)
    return rcfg, reconstruct(ds.test.v_spatial, ds.test.v_semantic, models, rcfg, rng, keys=ds.test.ids)


def cmd_reconstruct(cfg: ExperimentConfig, mode: str | None = None, ds: Dataset | None = None,
                    loaded=None) -> Path:
    """Reconstruct every test record under an ablation mode; PPM + JSON sidecar per item."""
    mode = mode or cfg.mode
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    ds = ds or _load_dataset(cfg)
    models, hashes = loaded or load_models(cfg)
    rcfg, rec = run_reconstruction(cfg, ds, models, mode)
    out = recon_dir(cfg, mode)
    out.mkdir(parents=True, exist_ok=True)
    keep_img, keep_cap = rec.keep
    # what the sampler was actually conditioned on; masked tokens carry no embedding
    cond = np.stack([rec.e_img * keep_img, rec.e_cap * keep_cap], axis=1)
    write_vxd(out / "conditioning.vxd", cond)
    for n, i in enumerate(ds.test.ids):
        write_ppm(out / f"{int(i):04d}.ppm", rec.images[n])
        sidecar = {
            "id": int(i), "mode": mode, "seed": cfg.seed, "tau": rec.tau, "iterations": rec.iterations,
            "reconstruction": asdict(rcfg), "ablation": ABLATION_NOTES[mode], "checkpoints": hashes,
        }
        (out / f"{int(i):04d}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    (out / "ids.json").write_text(json.dumps([int(i) for i in ds.test.ids]) + "\n")
    return out


def cmd_evaluate(cfg: ExperimentConfig, mode: str | None = None, ds: Dataset | None = None,
                 recon_path=None) -> MetricReport:
    """Score the reconstructions of one mode against the test stimuli."""
    mode = mode or cfg.mode
    ds = ds or _load_dataset(cfg)
    rdir = Path(recon_path) if recon_path else recon_dir(cfg, mode)
    _require(rdir, f"reconstructions for mode {mode} (run `reconstruct` first)")
    missing = [int(i) for i in ds.test.ids if not (rdir / f"{int(i):04d}.ppm").exists()]
    if missing:
        raise MissingArtifactError(f"missing reconstructions for test ids: {missing}")
    recons = np.stack([read_ppm(rdir / f"{int(i):04d}.ppm") for i in ds.test.ids])
    cond = read_vxd(rdir / "conditioning.vxd") if (rdir / "conditioning.vxd").exists() else None
    # both sides at the 8-bit precision of the stored PPMs
    targets = np.stack([read_ppm(dataset_dir(cfg) / "stimuli" / f"{int(i):04d}.ppm") for i in ds.test.ids])
    report = evaluate(
        recons, targets, ds.test.ids,
        None if cond is None else cond[:, 0], None if cond is None else cond[:, 1],
        ds.test.e_img, ds.test.e_cap, ds.codec.clip_image_embed, label=mode,
    )
    out = cfg.out_dir / "eval" / mode
    out.mkdir(parents=True, exist_ok=True)
    (out / "items.csv").write_text(report.items_csv())
    (out / "summary.csv").write_text(summary_csv([report]))
    (out / "summary.md").write_text(markdown_table([report]))
    return report


def cmd_ablate(cfg: ExperimentConfig) -> list[MetricReport]:
    """Reconstruct and evaluate the shared test set under all five modes."""
    ds = _load_dataset(cfg)
    loaded = load_models(cfg)
    reports = []
    for mode in ABLATION_MODES:
        log.info("ablation %s: %s", mode, ABLATION_NOTES[mode])
        cmd_reconstruct(cfg, mode, ds, loaded)
        reports.append(cmd_evaluate(cfg, mode, ds))
    out = cfg.out_dir / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(summary_csv(reports))
    (out / "ablation.md").write_text(markdown_table(reports))
    return reports


FIRST_LAYER = {"structural": "0.weight", "semantic": "trunk.0.weight"}


def contribution_map(weight, mask: RoiMask) -> np.ndarray:
    """Per-voxel L2 norm of the first-layer weight columns, placed in the full grid."""
    weight = np.asarray(weight, dtype=np.float64)
    return roi_scatter(np.linalg.norm(weight, axis=0), mask)


def _first_layer_kind(model) -> str:
    desc = model.describe()
    if "trunk" in desc:
        desc = desc["trunk"]
    return desc["layers"][0]["kind"]


def cmd_interpret(cfg: ExperimentConfig, which: str = "structural", checkpoint=None) -> Path:
    """Voxel contribution map from a decoder's first linear layer (VXD volume + CSV)."""
    if which not in FIRST_LAYER:
        raise ConfigError(f"interpret works on 'structural' or 'semantic', not {which!r}")
    ckpt = Path(checkpoint) if checkpoint else checkpoint_path(cfg, which)
    model, _, _ = load_checkpoint(_require(ckpt, f"{which} checkpoint"))
    if _first_layer_kind(model) != "Linear":
        raise ConfigError(f"first layer of {which} is {_first_layer_kind(model)}, not Linear")
    man = _require(dataset_dir(cfg) / "manifest.json", "dataset manifest")
    masks = read_vxd(man.parent / "masks.vxd").astype(bool)
    mask = RoiMask(masks[0 if which == "structural" else 1], "spatial" if which == "structural" else "semantic")
    weight = model.params()[FIRST_LAYER[which]]
    if weight.shape[1] != mask.count:
        raise ConfigError(f"first layer has {weight.shape[1]} inputs but the ROI has {mask.count} voxels")
    vol = contribution_map(weight, mask)
    out = cfg.out_dir / "interpret"
    out.mkdir(parents=True, exist_ok=True)
    write_vxd(out / f"{which}_contrib.vxd", vol)
    lines = ["x,y,z,contribution"]
    for x, y, z in zip(*np.nonzero(mask.mask)):
        lines.append(f"{x},{y},{z},{float(vol[x, y, z])!r}")
    (out / f"{which}_contrib.csv").write_text("\n".join(lines) + "\n")
    return out / f"{which}_contrib.vxd"


def cmd_gradcheck(cfg: ExperimentConfig, instances: int = 20):
    from .gradsuite import gradient_suite, summarize

    results = gradient_suite(instances, seed=cfg.seed)
    worst = summarize(results)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    lines = ["component,instances,max_rel_error"]
    counts = {}
    for r in results:
        counts[r.component] = counts.get(r.component, 0) + 1
    lines += [f"{k},{counts[k]},{v:.3e}" for k, v in worst.items()]
    (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    return worst
