"""Evaluation metrics and the diversity/fidelity embedding analysis.

Image-quality side: masked MSE over paired volumes, Fréchet distance and
unbiased squared MMD over feature sets from a pluggable extractor
(default: a deterministic handcrafted descriptor, see extract_features).
Segmentation side: Dice, sensitivity, specificity. Embedding side:
classical MDS to 2D, least-squares ellipse fitting, and Monte Carlo
ellipse overlap.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Volume
from .errors import (ConfigurationError, DimensionError,
                     InsufficientDataError, MaskDomainError,
                     NumericHealthError)
from .rng import substream

DEFAULT_EXTRACTOR_ID = "handcrafted-v1"


@dataclass
class FeatureVector:
    values: np.ndarray
    extractor_id: str = DEFAULT_EXTRACTOR_ID


@dataclass
class Ellipse:
    center: np.ndarray        # (2,)
    semi_axes: np.ndarray     # (2,), both > 0, major first
    angle: float              # radians, rotation of the major axis

    @property
    def area(self) -> float:
        return math.pi * float(self.semi_axes[0]) * float(self.semi_axes[1])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center[None, :]
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = d[:, 0] * c + d[:, 1] * s
        v = -d[:, 0] * s + d[:, 1] * c
        return (u / self.semi_axes[0]) ** 2 + (v / self.semi_axes[1]) ** 2 <= 1.0


def masked_mse(real: Volume, syn: Volume, m_lung: np.ndarray) -> float:
    """(1/sum m) * sum m * (real - syn)^2 over the lung mask."""
    m = np.asarray(m_lung)
    if real.shape != syn.shape or real.shape != m.shape:
        raise DimensionError(
            f"shape mismatch: real {real.shape}, syn {syn.shape}, mask {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise MaskDomainError("lung mask must be binary")
    total = m.sum()
    if total == 0:
        raise MaskDomainError("all-zero lung mask: masked MSE undefined")
    diff = real.values.astype(np.float64) - syn.values.astype(np.float64)
    return float((m * diff ** 2).sum() / total)


def _octant_slices(shape):
    for zi in range(2):
        for yi in range(2):
            for xi in range(2):
                yield tuple(
                    slice(0, s // 2) if i == 0 else slice(s // 2, s)
                    for i, s in zip((zi, yi, xi), shape))


def _pooled(values: np.ndarray, side: int) -> np.ndarray:
    """Mean-pool to side^3 by averaging over contiguous index chunks."""
    out = values
    for axis in range(3):
        chunks = np.array_split(out, side, axis=axis)
        out = np.stack([c.mean(axis=axis) for c in chunks], axis=axis)
    return out


def extract_features(vol: Volume,
                     extractor_id: str = DEFAULT_EXTRACTOR_ID) -> FeatureVector:
    """Deterministic handcrafted descriptor of a normalized volume.

    Concatenates per-octant mean/std/min/max (32 values), a 16-bin
    intensity histogram over [-1, 1] (density-normalized), and mean-pooled
    intensity pyramids at sides 4, 2, 1 (73 values): 121 values total,
    independent of resolution.
    """
    v = vol.values.astype(np.float64)
    if not np.isfinite(v).all():
        raise NumericHealthError("non-finite intensities in feature extraction")
    if min(vol.shape) < 4:
        raise DimensionError(f"volume too small for features: {vol.shape}")
    parts = []
    for sl in _octant_slices(vol.shape):
        block = v[sl]
        parts.extend([block.mean(), block.std(), block.min(), block.max()])
    hist, _ = np.histogram(v, bins=16, range=(-1.0, 1.0))
    parts.extend(hist / v.size)
    for side in (4, 2, 1):
        parts.extend(_pooled(v, side).ravel())
    return FeatureVector(np.array(parts, dtype=np.float64), extractor_id)


def _as_matrix(features) -> np.ndarray:
    rows = [f.values if isinstance(f, FeatureVector) else np.asarray(f)
            for f in features]
    mat = np.asarray(rows, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionError("feature set must be a list of equal-length vectors")
    return mat


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2)), PSD-projected."""
    mu_a, mu_b = np.asarray(mu_a, float), np.asarray(mu_b, float)
    cov_a, cov_b = np.asarray(cov_a, float), np.asarray(cov_b, float)
    prod = cov_a @ cov_b
    sym = (prod + prod.T) / 2.0
    evals = np.linalg.eigvalsh(sym)
    tr_sqrt = np.sqrt(np.clip(evals, 0.0, None)).sum()
    value = (np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b)
             - 2.0 * tr_sqrt)
    return float(max(value, 0.0))


def fid(A, B) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    a, b = _as_matrix(A), _as_matrix(B)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientDataError("FID needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    return frechet_distance(a.mean(axis=0), np.cov(a, rowvar=False),
                            b.mean(axis=0), np.cov(b, rowvar=False))


def _rbf(sq_dists: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-sq_dists / (2.0 * bandwidth ** 2))


def mmd(A, B, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with an RBF kernel.

    Bandwidth defaults to the median pairwise distance over the pooled
    sets; may be slightly negative (unbiased estimator, reported as-is).
    """
    a, b = _as_matrix(A), _as_matrix(B)
    if len(a) < 2 or len(b) < 2:
        raise InsufficientDataError("MMD needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    pooled = np.concatenate([a, b])
    sq = np.sum((pooled[:, None, :] - pooled[None, :, :]) ** 2, axis=-1)
    if bandwidth is None:
        n = len(pooled)
        iu = np.triu_indices(n, k=1)
        bandwidth = float(np.sqrt(np.median(sq[iu])))
        if bandwidth == 0.0:
            warnings.warn("all points identical across both sets; MMD is 0")
            return 0.0
    if bandwidth <= 0:
        raise ConfigurationError(f"bandwidth must be > 0, got {bandwidth}")
    m, n = len(a), len(b)
    k = _rbf(sq, bandwidth)
    kaa, kbb, kab = k[:m, :m], k[m:, m:], k[:m, m:]
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    term_ab = kab.sum() / (m * n)
    return float(term_a + term_b - 2.0 * term_ab)


def _check_binary_pair(pred, truth):
    p, t = np.asarray(pred), np.asarray(truth)
    if p.shape != t.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {t.shape}")
    if not np.isin(p, (0, 1)).all() or not np.isin(t, (0, 1)).all():
        raise MaskDomainError("masks must be binary")
    return p.astype(bool), t.astype(bool)


def dice(pred, truth) -> float:
    """2|P∩T| / (|P|+|T|); both-empty is defined as 1 (agreement on absence)."""
    p, t = _check_binary_pair(pred, truth)
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


def sensitivity(pred, truth) -> float:
    """TP / (TP + FN)."""
    p, t = _check_binary_pair(pred, truth)
    positives = t.sum()
    if positives == 0:
        raise InsufficientDataError("sensitivity undefined: empty truth mask")
    return float(np.logical_and(p, t).sum() / positives)


def specificity(pred, truth) -> float:
    """TN / (TN + FP)."""
    p, t = _check_binary_pair(pred, truth)
    negatives = (~t).sum()
    if negatives == 0:
        raise InsufficientDataError("specificity undefined: truth mask is full")
    return float(np.logical_and(~p, ~t).sum() / negatives)


def mds_embed(D: np.ndarray) -> np.ndarray:
    """Classical MDS to 2D: double-center -D^2/2, top-2 eigenpairs."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise DimensionError(f"distance matrix must be square, got {D.shape}")
    if not np.allclose(D, D.T, atol=1e-10):
        raise ConfigurationError("distance matrix must be symmetric")
    if np.any(D < 0):
        raise ConfigurationError("distance matrix must be non-negative")
    if not np.allclose(np.diag(D), 0.0, atol=1e-10):
        raise ConfigurationError("distance matrix must have a zero diagonal")
    n = len(D)
    J = np.eye(n) - np.ones((n, n)) / n
    B = -0.5 * J @ (D ** 2) @ J
    evals, evecs = np.linalg.eigh(B)
    order = np.argsort(evals)[::-1][:2]
    lam = np.clip(evals[order], 0.0, None)
    return evecs[:, order] * np.sqrt(lam)[None, :]


def fit_ellipse(points: np.ndarray) -> Ellipse:
    """Direct least-squares conic fit constrained to an ellipse.

    Stable formulation of the constrained algebraic fit (4AC - B^2 = 1),
    then conversion of the conic to center / semi-axes / rotation.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 5:
        raise InsufficientDataError(
            f"ellipse fit needs >= 5 2D points, got shape {pts.shape}")
    x, y = pts[:, 0], pts[:, 1]
    d1 = np.stack([x * x, x * y, y * y], axis=1)
    d2 = np.stack([x, y, np.ones_like(x)], axis=1)
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    c1 = np.array([[0.0, 0.0, 2.0], [0.0, -1.0, 0.0], [2.0, 0.0, 0.0]])
    try:
        t_mat = -np.linalg.solve(s3, s2.T)
        m_mat = np.linalg.solve(c1, s1 + s2 @ t_mat)
    except np.linalg.LinAlgError as exc:
        raise InsufficientDataError(f"degenerate point set for ellipse fit: {exc}") from exc
    evals, evecs = np.linalg.eig(m_mat)
    vr = np.real(evecs)
    cond = 4.0 * vr[0] * vr[2] - vr[1] ** 2
    valid = np.where((np.abs(np.imag(evals)) < 1e-9) & (cond > 0))[0]
    if len(valid) == 0:
        raise InsufficientDataError("no ellipse solution; points may be collinear")
    a1 = np.real(evecs[:, valid[0]])
    coeffs = np.concatenate([a1, t_mat @ a1])
    return _conic_to_ellipse(coeffs)


def _conic_to_ellipse(coeffs) -> Ellipse:
    a, b, c, d, e, f = coeffs
    b2 = b / 2.0
    if a + c < 0:
        # Normalize the overall sign so the quadratic form is positive.
        a, b, c, d, e, f = (-v for v in (a, b, c, d, e, f))
        b2 = -b2
    det = a * c - b2 * b2
    if det <= 0:
        raise InsufficientDataError("conic is not an ellipse")
    cx, cy = np.linalg.solve(np.array([[2.0 * a, b], [b, 2.0 * c]]),
                             np.array([-d, -e]))
    # Value of the conic at the center gives the scaled constant term.
    f0 = a * cx * cx + b * cx * cy + c * cy * cy + d * cx + e * cy + f
    m = np.array([[a, b2], [b2, c]]) / -f0
    evals, evecs = np.linalg.eigh(m)
    if np.any(evals <= 0):
        raise InsufficientDataError("degenerate ellipse (non-positive axis)")
    semi = 1.0 / np.sqrt(evals)          # ascending evals -> descending axes
    major_vec = evecs[:, 0]
    return Ellipse(center=np.array([cx, cy]),
                   semi_axes=np.array([semi[0], semi[1]]),
                   angle=float(math.atan2(major_vec[1], major_vec[0])))


def ellipse_overlap(A: Ellipse, B: Ellipse, n_samples: int = 100_000,
                    seed: int = 0) -> dict:
    """Monte Carlo intersection over the joint bounding box.

    Returns {"area": ..., "fraction_a": ..., "fraction_b": ...} where the
    fractions are intersection area over each ellipse's own area.
    """
    lo, hi = _joint_bbox(A, B)
    rng = substream(seed, "ellipse-overlap")
    pts = rng.uniform(lo, hi, size=(n_samples, 2))
    inside = A.contains(pts) & B.contains(pts)
    box_area = float(np.prod(hi - lo))
    area = box_area * inside.mean()
    return {"area": area,
            "fraction_a": area / A.area,
            "fraction_b": area / B.area}


def _joint_bbox(*ellipses):
    los, his = [], []
    for e in ellipses:
        c, s = math.cos(e.angle), math.sin(e.angle)
        # Extent of a rotated ellipse along each axis.
        ex = math.hypot(e.semi_axes[0] * c, e.semi_axes[1] * s)
        ey = math.hypot(e.semi_axes[0] * s, e.semi_axes[1] * c)
        los.append(e.center - np.array([ex, ey]))
        his.append(e.center + np.array([ex, ey]))
    return np.min(los, axis=0), np.max(his, axis=0)


def aggregate_folds(per_fold) -> tuple:
    """Mean and normal-approximation 95% CI halfwidth (1.96 * sd / sqrt(n))."""
    vals = np.asarray(per_fold, dtype=np.float64)
    if vals.ndim != 1 or len(vals) < 2:
        raise InsufficientDataError("fold aggregation needs >= 2 fold values")
    mean = float(vals.mean())
    halfwidth = float(1.96 * vals.std(ddof=1) / math.sqrt(len(vals)))
    return mean, halfwidth
