"""Univariate Gaussian-kernel density estimation with Scott, Silverman, and
cross-validated bandwidths, shared evaluation grids, Jensen-Shannon distance,
overlap quantification, and per-class shape summaries."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DataQualityWarning
from .preprocess import iqr_outlier_mask, quantile
from .tabular import ColumnTable

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# Densities are floored at this value inside logs (cross-validation scoring).
DENSITY_FLOOR = 1e-300

# Grid padding in bandwidths on each side; exp(-0.5 * 5^2) makes the
# truncated tail mass negligible at the default tolerances.
GRID_PAD_BANDWIDTHS = 5.0

DEFAULT_GRID_SIZE = 512

# Pooled sizes at or above this use the binned FFT scorer inside
# cv_bandwidth; below it the exact quadratic evaluator runs.
FAST_CV_THRESHOLD = 4096
_FAST_BINS_PER_BANDWIDTH = 16
_FAST_GRID_CAP = 1 << 17
_KERNEL_REACH = 8.0


def _sample_std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1))


def _fallback_bandwidth(x: np.ndarray) -> float:
    return 1e-3 * max(float(np.max(np.abs(x))), 1.0)


def _degenerate(x: np.ndarray, why: str) -> float:
    h = _fallback_bandwidth(x)
    warnings.warn(
        f"{why}; falling back to bandwidth {h:g}",
        DataQualityWarning,
        stacklevel=3,
    )
    return h


def scott_bandwidth(x: np.ndarray) -> float:
    """Scott's rule h = sigma_hat * n^(-1/5); degenerate spread falls back."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError("scott_bandwidth on an empty sample")
    if x.size < 2:
        return _degenerate(x, "scott_bandwidth: single sample")
    sigma = _sample_std(x)
    if sigma <= 0.0:
        return _degenerate(x, "scott_bandwidth: zero sample spread")
    return sigma * x.size ** (-0.2)


def silverman_bandwidth(x: np.ndarray) -> float:
    """Silverman's rule h = 0.9 * min(sigma_hat, IQR/1.34) * n^(-1/5)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DataError("silverman_bandwidth on an empty sample")
    if x.size < 2:
        return _degenerate(x, "silverman_bandwidth: single sample")
    spread = min(_sample_std(x), (quantile(x, 0.75) - quantile(x, 0.25)) / 1.34)
    if spread <= 0.0:
        return _degenerate(x, "silverman_bandwidth: zero sample spread")
    return 0.9 * spread * x.size ** (-0.2)


def default_cv_candidates(x: np.ndarray, count: int = 20) -> np.ndarray:
    """Log-spaced candidate bandwidths in [0.1 * h_scott, 10 * h_scott]."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataQualityWarning)
        h_scott = scott_bandwidth(x)
    return np.geomspace(0.1 * h_scott, 10.0 * h_scott, count)


def _exact_density(samples: np.ndarray, points: np.ndarray, h: float) -> np.ndarray:
    """Gaussian KDE evaluated exactly, chunked to bound the work matrix."""
    n = samples.size
    out = np.empty(points.size, dtype=np.float64)
    scaled = samples / h
    chunk = max(1, 4_000_000 // max(n, 1))
    for start in range(0, points.size, chunk):
        z = np.subtract.outer(points[start : start + chunk] / h, scaled)
        np.multiply(z, z, out=z)
        np.multiply(z, -0.5, out=z)
        np.exp(z, out=z)
        out[start : start + chunk] = z.sum(axis=1)
    return out / (n * h * _SQRT_2PI)


def _linear_bin(x: np.ndarray, lo: float, dx: float, n_bins: int) -> np.ndarray:
    """Spread each sample's unit weight over its two bracketing grid nodes."""
    pos = (x - lo) / dx
    base = np.clip(np.floor(pos).astype(np.int64), 0, n_bins - 2)
    frac = pos - base
    counts = np.bincount(base, weights=1.0 - frac, minlength=n_bins)
    counts += np.bincount(base + 1, weights=frac, minlength=n_bins)
    return counts


def _binned_cv_scores(
    x: np.ndarray, fold_of: np.ndarray, n_folds: int, candidates: np.ndarray
) -> np.ndarray:
    """Total held-out log-likelihood per candidate via binned FFT convolution.

    The sample is linearly binned on a uniform internal grid; per fold the
    training histogram is the all-sample histogram minus the held-out one,
    and densities at held-out points are interpolated off the convolved grid.
    Resolution is 1/16 of the smallest candidate bandwidth (capped), keeping
    the interpolation error far below candidate score gaps.
    """
    lo, hi = float(np.min(x)), float(np.max(x))
    span = max(hi - lo, 1e-12)
    dx = min(candidates) / _FAST_BINS_PER_BANDWIDTH
    n_bins = int(min(math.ceil(span / dx) + 1, _FAST_GRID_CAP))
    dx = span / (n_bins - 1)
    grid = lo + dx * np.arange(n_bins)

    hist_all = _linear_bin(x, lo, dx, n_bins)
    hist_folds = [
        _linear_bin(x[fold_of == f], lo, dx, n_bins) for f in range(n_folds)
    ]

    reach = int(math.ceil(_KERNEL_REACH * max(candidates) / dx))
    nfft = 1 << max(n_bins + reach + 1, 2).bit_length()
    fft_folds = [np.fft.rfft(hist_all - hf, nfft) for hf in hist_folds]

    scores = np.zeros(len(candidates))
    for ci, h in enumerate(candidates):
        radius = int(math.ceil(_KERNEL_REACH * h / dx))
        offsets = dx * np.arange(-radius, radius + 1)
        kernel = np.exp(-0.5 * (offsets / h) ** 2) / (h * _SQRT_2PI)
        fft_kernel = np.fft.rfft(np.roll(np.pad(kernel, (0, nfft - kernel.size)), -radius))
        for f in range(n_folds):
            held = x[fold_of == f]
            n_train = x.size - held.size
            dens_grid = np.fft.irfft(fft_folds[f] * fft_kernel, nfft)[:n_bins] / n_train
            dens = np.interp(held, grid, dens_grid)
            scores[ci] += float(np.sum(np.log(np.maximum(dens, DENSITY_FLOOR))))
    return scores


def cv_bandwidth(
    x: np.ndarray,
    candidates: np.ndarray | None = None,
    folds: int = 5,
    seed: int | list[int] = 0,
) -> float:
    """Pick the candidate bandwidth maximizing mean held-out log-likelihood.

    Folds come from a seeded shuffle with round-robin assignment. Densities
    are floored at 1e-300 inside the log; ties go to the largest bandwidth.

    Args:
        x: sample vector, n >= folds.
        candidates: candidate bandwidths; default 20 log-spaced values in
            [0.1 * h_scott, 10 * h_scott].
        folds: number of CV folds, >= 2.
        seed: RNG seed for the fold shuffle.
    """
    x = np.asarray(x, dtype=np.float64)
    if folds < 2:
        raise DataError(f"cv_bandwidth needs folds >= 2, got {folds}")
    if x.size < folds:
        raise DataError(f"cv_bandwidth needs n >= folds ({x.size} < {folds})")
    cand = default_cv_candidates(x) if candidates is None else np.asarray(
        candidates, dtype=np.float64
    )
    if cand.size == 0:
        raise DataError("cv_bandwidth: empty candidate set")
    if np.any(cand <= 0.0):
        raise DataError("cv_bandwidth: candidates must be positive")
    order = np.argsort(cand)
    cand = cand[order]

    rng = np.random.default_rng(seed)
    fold_of = np.empty(x.size, dtype=np.int64)
    fold_of[rng.permutation(x.size)] = np.arange(x.size) % folds

    if x.size >= FAST_CV_THRESHOLD:
        scores = _binned_cv_scores(x, fold_of, folds, cand)
    else:
        scores = np.zeros(cand.size)
        for f in range(folds):
            held = x[fold_of == f]
            train = x[fold_of != f]
            for ci, h in enumerate(cand):
                dens = _exact_density(train, held, h)
                scores[ci] += float(np.sum(np.log(np.maximum(dens, DENSITY_FLOOR))))

    best = 0
    for ci in range(cand.size):
        if scores[ci] >= scores[best]:
            best = ci
    return float(cand[best])


@dataclass(frozen=True)
class KdeModel:
    """Gaussian-kernel density estimate: samples, bandwidth, and its policy."""

    samples: np.ndarray
    bandwidth: float
    policy: str

    def __post_init__(self) -> None:
        if self.samples.size == 0:
            raise DataError("KdeModel needs a non-empty sample")
        if not self.bandwidth > 0.0:
            raise DataError(f"KdeModel bandwidth must be > 0, got {self.bandwidth}")


def bandwidth_for(
    x: np.ndarray,
    policy: str,
    seed: int | list[int] = 0,
    candidates: np.ndarray | None = None,
    folds: int = 5,
) -> float:
    """Bandwidth under the named policy: scott, silverman, or cv."""
    if policy == "scott":
        return scott_bandwidth(x)
    if policy == "silverman":
        return silverman_bandwidth(x)
    if policy == "cv":
        return cv_bandwidth(x, candidates=candidates, folds=folds, seed=seed)
    raise DataError(f"unknown bandwidth policy {policy!r}")


def fit_kde(
    x: np.ndarray,
    policy: str = "scott",
    seed: int | list[int] = 0,
    candidates: np.ndarray | None = None,
    folds: int = 5,
    bandwidth: float | None = None,
) -> KdeModel:
    """Fit a KDE under a bandwidth policy, or with an explicit bandwidth."""
    x = np.asarray(x, dtype=np.float64)
    if bandwidth is not None:
        return KdeModel(samples=x, bandwidth=float(bandwidth), policy="fixed")
    h = bandwidth_for(x, policy, seed=seed, candidates=candidates, folds=folds)
    return KdeModel(samples=x, bandwidth=h, policy=policy)


def kde_eval(model: KdeModel, points: np.ndarray) -> np.ndarray:
    """f_hat(x) = (1/(n*h)) * sum_j phi((x - x_j)/h) at each point."""
    points = np.asarray(points, dtype=np.float64)
    return _exact_density(model.samples, points, model.bandwidth)


@dataclass(frozen=True)
class EvalGrid:
    """Uniformly spaced, strictly increasing evaluation points."""

    points: np.ndarray

    def __post_init__(self) -> None:
        if self.points.size < 2:
            raise DataError("EvalGrid needs at least 2 points")

    @property
    def spacing(self) -> float:
        return float(self.points[1] - self.points[0])

    @property
    def size(self) -> int:
        return int(self.points.size)


def make_grid(
    samples_a: np.ndarray,
    samples_b: np.ndarray,
    h_a: float,
    h_b: float,
    n_points: int = DEFAULT_GRID_SIZE,
) -> EvalGrid:
    """Shared uniform grid covering both samples, padded by 5 * max(h_a, h_b)."""
    samples_a = np.asarray(samples_a, dtype=np.float64)
    samples_b = np.asarray(samples_b, dtype=np.float64)
    if samples_a.size == 0 or samples_b.size == 0:
        raise DataError("make_grid needs two non-empty sample sets")
    pad = GRID_PAD_BANDWIDTHS * max(h_a, h_b)
    lo = min(float(samples_a.min()), float(samples_b.min())) - pad
    hi = max(float(samples_a.max()), float(samples_b.max())) + pad
    return EvalGrid(points=np.linspace(lo, hi, n_points))


@dataclass(frozen=True)
class DensityPair:
    """Two renormalized mass vectors on a shared grid."""

    grid: EvalGrid
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self) -> None:
        if self.p.shape != self.q.shape or self.p.size != self.grid.size:
            raise DataError("DensityPair vectors must match the grid length")


def to_mass_pair(kde_a: KdeModel, kde_b: KdeModel, grid: EvalGrid) -> DensityPair:
    """Evaluate both KDEs on the grid and renormalize each to unit mass."""
    p = kde_eval(kde_a, grid.points)
    q = kde_eval(kde_b, grid.points)
    sp, sq = float(p.sum()), float(q.sum())
    if not (math.isfinite(sp) and math.isfinite(sq)) or sp <= 0.0 or sq <= 0.0:
        raise DataError("to_mass_pair: density sums to zero on the grid")
    return DensityPair(grid=grid, p=p / sp, q=q / sq)


def js_distance_from_masses(p: np.ndarray, q: np.ndarray) -> float:
    """Square root of the base-2 Jensen-Shannon divergence of two mass vectors."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def half_kl(a: np.ndarray) -> float:
        mask = a > 0.0
        return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))

    divergence = 0.5 * half_kl(p) + 0.5 * half_kl(q)
    return math.sqrt(min(max(divergence, 0.0), 1.0))


def js_distance(pair: DensityPair) -> float:
    """Jensen-Shannon distance T in [0, 1] between the pair's mass vectors."""
    return js_distance_from_masses(pair.p, pair.q)


def overlap_coefficient(pair: DensityPair) -> float:
    """Shared mass sum_g min(p_g, q_g), i.e. 1 minus total-variation distance."""
    return float(np.minimum(pair.p, pair.q).sum())


def overlap_intervals(
    pair: DensityPair, eps: float | None = None
) -> list[tuple[float, float]]:
    """Maximal grid intervals where both masses exceed eps.

    Args:
        pair: mass vectors on a shared grid.
        eps: threshold; default 1e-3 times the larger peak mass.

    Returns:
        [lo, hi] endpoints in feature units, one pair per maximal run.
    """
    if eps is None:
        eps = 1e-3 * max(float(pair.p.max()), float(pair.q.max()))
    inside = np.minimum(pair.p, pair.q) > eps
    edges = np.diff(inside.astype(np.int8))
    starts = list(np.flatnonzero(edges == 1) + 1)
    ends = list(np.flatnonzero(edges == -1))
    if inside[0]:
        starts.insert(0, 0)
    if inside[-1]:
        ends.append(inside.size - 1)
    x = pair.grid.points
    return [(float(x[s]), float(x[e])) for s, e in zip(starts, ends)]


@dataclass(frozen=True)
class ClassShape:
    """Five-number summary, outlier count, and KDE curve for one class."""

    class_name: str
    count: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float
    outliers: int
    bandwidth: float
    density: np.ndarray


@dataclass(frozen=True)
class ShapeSummary:
    """Per-class shape statistics for one feature on a shared grid."""

    feature: str
    grid: EvalGrid
    classes: list[ClassShape]


def shape_summary(
    table: ColumnTable,
    feature: str,
    policy: str = "scott",
    n_points: int = DEFAULT_GRID_SIZE,
    seed: int = 0,
) -> ShapeSummary:
    """Box-plot statistics plus a KDE curve per class, all on one grid.

    Classes absent from the table are skipped with a warning; single-row
    classes get the degenerate fallback bandwidth.
    """
    x_all = table.column(feature).astype(np.float64, copy=False)
    if x_all.size == 0:
        raise DataError(f"shape_summary: feature {feature!r} has no rows")
    per_class: list[tuple[str, np.ndarray, float]] = []
    for class_id in range(table.vocabulary.n_classes):
        name = table.vocabulary.name_of(class_id)
        x = x_all[table.labels == class_id]
        if x.size == 0:
            warnings.warn(
                f"shape_summary: class {name!r} has no rows, skipping",
                DataQualityWarning,
                stacklevel=2,
            )
            continue
        h = bandwidth_for(x, policy, seed=seed) if x.size >= 2 else _degenerate(
            x, f"shape_summary: class {name!r} has one row"
        )
        per_class.append((name, x, h))
    if not per_class:
        raise DataError(f"shape_summary: no class has rows for {feature!r}")

    h_max = max(h for _, _, h in per_class)
    pad = GRID_PAD_BANDWIDTHS * h_max
    grid = EvalGrid(
        points=np.linspace(float(x_all.min()) - pad, float(x_all.max()) + pad, n_points)
    )
    shapes = []
    for name, x, h in per_class:
        model = KdeModel(samples=x, bandwidth=h, policy=policy)
        shapes.append(
            ClassShape(
                class_name=name,
                count=int(x.size),
                minimum=float(x.min()),
                q1=quantile(x, 0.25),
                median=quantile(x, 0.5),
                q3=quantile(x, 0.75),
                maximum=float(x.max()),
                outliers=int(iqr_outlier_mask(x).sum()),
                bandwidth=h,
                density=kde_eval(model, grid.points),
            )
        )
    return ShapeSummary(feature=feature, grid=grid, classes=shapes)
