"""Image-quality and identification metrics for reconstructions.

Images are (3, H, W) or (H, W) arrays in [0, 1]. Feature extractors for the
identification metrics are plain callables mapping a batch of images to a
(B, F) feature matrix.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03
LUMA = np.array([0.299, 0.587, 0.114])


class ZeroVarianceWarning(UserWarning):
    """A correlation had a constant operand and was defined as 0."""


class MetricError(ValueError):
    pass


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return a, b


def pixcorr(a, b) -> float:
    """Pearson correlation over all flattened pixels; 0 (with a warning) if either is constant."""
    a, b = _pair(a, b, "pixcorr")
    x = a.ravel() - a.mean()
    y = b.ravel() - b.mean()
    sxx, syy = float(x @ x), float(y @ y)
    if sxx == 0.0 or syy == 0.0:
        warnings.warn("pixcorr of a constant image defined as 0", ZeroVarianceWarning, stacklevel=2)
        return 0.0
    return float(np.clip((x @ y) / np.sqrt(sxx * syy), -1.0, 1.0))


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return np.tensordot(LUMA, img, axes=1)
    raise ShapeError(f"expected (H, W) or (3, H, W) image, got {img.shape}")


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid 7x7 windows of the grayscale images (uniform window,
    population statistics)."""
    a, b = _pair(a, b, "ssim")
    x, y = to_gray(a), to_gray(b)
    w = SSIM_WINDOW
    if min(x.shape) < w:
        raise ShapeError(f"ssim: image {x.shape} smaller than the {w}x{w} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def local_mean(img):
        return sliding_window_view(img, (w, w)).mean(axis=(-2, -1))

    mx, my = local_mean(x), local_mean(y)
    vx = local_mean(x * x) - mx * mx
    vy = local_mean(y * y) - my * my
    cxy = local_mean(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def _corr_matrix(f, g):
    """Row-wise Pearson correlations between feature rows of f and g; constant rows give 0."""
    f = f - f.mean(axis=1, keepdims=True)
    g = g - g.mean(axis=1, keepdims=True)
    nf = np.linalg.norm(f, axis=1)
    ng = np.linalg.norm(g, axis=1)
    denom = np.outer(nf, ng)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(denom > 0, (f @ g.T) / np.where(denom > 0, denom, 1.0), 0.0)
    return c


def two_way_identification(recons, targets, feature_fn=None) -> float:
    """Percentage of ordered pairs (i, j != i) where recon i correlates more with
    target i than with target j; ties count one half."""
    recons = np.asarray(recons, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(recons) != len(targets):
        raise MetricError(f"{len(recons)} reconstructions vs {len(targets)} targets")
    n = len(recons)
    if n < 2:
        raise MetricError("two-way identification needs at least 2 items")
    fn = feature_fn or flatten_features
    c = _corr_matrix(np.asarray(fn(recons), dtype=np.float64).reshape(n, -1),
                     np.asarray(fn(targets), dtype=np.float64).reshape(n, -1))
    own = np.diag(c)[:, None]
    score = (own > c).astype(np.float64) + 0.5 * (own == c)
    np.fill_diagonal(score, 0.0)
    return float(100.0 * score.sum() / (n * (n - 1)))


def embedding_retrieval(pred, true, k: int = 1) -> float:
    """Top-k cosine retrieval accuracy of ``true[i]`` given ``pred[i]`` among all of ``true``.

    Tied similarities are resolved by expected rank: with ``g`` candidates strictly
    better and ``e`` others tied with the true one, the hit probability is
    ``clip((k - g) / (e + 1), 0, 1)``. A zero prediction vector ties with everything
    and so scores exactly ``k / n``.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    true = np.atleast_2d(np.asarray(true, dtype=np.float64))
    if pred.shape != true.shape:
        raise ShapeError(f"embedding_retrieval: shapes {pred.shape} and {true.shape} differ")
    n = len(pred)
    if not 1 <= k <= n:
        raise MetricError(f"k={k} outside [1, {n}]")
    pn = np.linalg.norm(pred, axis=1, keepdims=True)
    tn = np.linalg.norm(true, axis=1, keepdims=True)
    p = np.divide(pred, pn, out=np.zeros_like(pred), where=pn > 0)
    t = np.divide(true, tn, out=np.zeros_like(true), where=tn > 0)
    sims = p @ t.T
    own = np.diag(sims)[:, None]
    better = (sims > own).sum(axis=1)
    ties = (sims == own).sum(axis=1) - 1
    return float(np.mean(np.clip((k - better) / (ties + 1), 0.0, 1.0)))


def flatten_features(images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    return images.reshape(len(images), -1)


def pooled_features(images, block: int = 8) -> np.ndarray:
    """Low-level stand-in features: per-channel block means on a ``block`` x ``block`` grid."""
    x = np.asarray(images, dtype=np.float64)
    b, c, h, w = x.shape
    if h % block or w % block:
        raise ShapeError(f"image {h}x{w} not divisible into a {block}x{block} grid")
    return x.reshape(b, c, block, h // block, block, w // block).mean(axis=(3, 5)).reshape(b, -1)


@dataclass
class MetricReport:
    pixcorr: float
    ssim: float
    two_way_feature_id: float  # percentage, pooled low-level features
    two_way_clip_id: float  # percentage, image-embedder features
    embedding_cosine: float  # mean cosine of conditioning vs true embeddings
    embedding_top1: float  # top-1 retrieval of the conditioning embeddings
    chance_top1: float
    n: int
    items: list = field(default_factory=list)  # per-item dicts
    label: str = ""

    def summary(self) -> dict:
        return {
            "pixcorr": self.pixcorr, "ssim": self.ssim, "two_way_feature_id": self.two_way_feature_id,
            "two_way_clip_id": self.two_way_clip_id, "embedding_cosine": self.embedding_cosine,
            "embedding_top1": self.embedding_top1, "chance_top1": self.chance_top1, "n": self.n,
        }

    def items_csv(self) -> str:
        cols = ["id", "pixcorr", "ssim", "cos_img", "cos_cap"]
        lines = [",".join(cols)]
        for row in self.items:
            lines.append(",".join(str(row[c]) if c == "id" else f"{row[c]:.6f}" for c in cols))
        return "\n".join(lines) + "\n"


SUMMARY_COLUMNS = [
    ("PixCorr", "pixcorr", "{:.3f}"),
    ("SSIM", "ssim", "{:.3f}"),
    ("Pooled 2-way (%)", "two_way_feature_id", "{:.1f}"),
    ("Embed 2-way (%)", "two_way_clip_id", "{:.1f}"),
    ("Cond. cosine", "embedding_cosine", "{:.3f}"),
    ("Cond. top-1", "embedding_top1", "{:.3f}"),
]


def markdown_table(reports: list[MetricReport]) -> str:
    head = "| Setting | " + " | ".join(c[0] for c in SUMMARY_COLUMNS) + " |"
    sep = "|---|" + "---:|" * len(SUMMARY_COLUMNS)
    rows = [head, sep]
    for r in reports:
        s = r.summary()
        rows.append(f"| {r.label or '-'} | " + " | ".join(fmt.format(s[key]) for _, key, fmt in SUMMARY_COLUMNS) + " |")
    return "\n".join(rows) + "\n"


def summary_csv(reports: list[MetricReport]) -> str:
    keys = list(reports[0].summary()) if reports else []
    lines = ["setting," + ",".join(keys)]
    for r in reports:
        s = r.summary()
        lines.append(r.label + "," + ",".join(f"{s[k]:.6f}" if isinstance(s[k], float) else str(s[k]) for k in keys))
    return "\n".join(lines) + "\n"


def _cosines(a, b):
    an = np.linalg.norm(a, axis=1)
    bn = np.linalg.norm(b, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(an * bn > 0, np.sum(a * b, axis=1) / np.where(an * bn > 0, an * bn, 1.0), 0.0)


def evaluate(recons, targets, ids=None, cond_img=None, cond_cap=None, true_img=None, true_cap=None,
             embed_fn=None, label: str = "") -> MetricReport:
    """Full report for paired reconstructions and targets.

    ``cond_img``/``cond_cap`` are the embeddings the sampler was conditioned on
    (zero rows for masked tokens); they are scored against ``true_img``/``true_cap``.
    Embedding metrics are the mean over the image and caption tokens and are
    NaN when no embeddings are supplied.
    """
    recons = np.asarray(recons, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if recons.shape != targets.shape:
        raise ShapeError(f"reconstructions {recons.shape} vs targets {targets.shape}")
    n = len(recons)
    ids = list(range(n)) if ids is None else [int(i) for i in ids]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ZeroVarianceWarning)
        pcs = [pixcorr(r, t) for r, t in zip(recons, targets)]
    degenerate = len(caught)
    ssims = [ssim(r, t) for r, t in zip(recons, targets)]
    have_emb = all(x is not None for x in (cond_img, cond_cap, true_img, true_cap))
    if have_emb:
        ci, cc = _cosines(np.asarray(cond_img), np.asarray(true_img)), _cosines(np.asarray(cond_cap), np.asarray(true_cap))
        emb_cos = float((ci.mean() + cc.mean()) / 2)
        top1 = (embedding_retrieval(cond_img, true_img) + embedding_retrieval(cond_cap, true_cap)) / 2
    else:
        ci = cc = np.full(n, np.nan)
        emb_cos = top1 = float("nan")
    items = [{"id": i, "pixcorr": p, "ssim": s, "cos_img": float(a), "cos_cap": float(c)}
             for i, p, s, a, c in zip(ids, pcs, ssims, ci, cc)]
    report = MetricReport(
        pixcorr=float(np.mean(pcs)),
        ssim=float(np.mean(ssims)),
        two_way_feature_id=two_way_identification(recons, targets, pooled_features) if n > 1 else float("nan"),
        two_way_clip_id=two_way_identification(recons, targets, embed_fn) if n > 1 and embed_fn else float("nan"),
        embedding_cosine=emb_cos,
        embedding_top1=float(top1),
        chance_top1=1.0 / n,
        n=n,
        items=items,
        label=label,
    )
    if degenerate:
        warnings.warn(f"{degenerate} constant reconstruction(s): pixcorr set to 0", ZeroVarianceWarning, stacklevel=2)
    return report
