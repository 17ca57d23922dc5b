"""Segmentation of scalar volumes: Otsu, 1-D Gaussian mixture, region growing.

All three methods produce a BinaryMask from a ScalarVolume.  Otsu and the
GMM decision boundary reduce to a single intensity threshold; region
growing is a seeded flood fill with statistics frozen at the seeds so the
result does not depend on traversal order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .kernels import active_kernels
from .volume import BinaryMask, ScalarVolume

N_BINS = 256


@dataclass(frozen=True)
class Histogram:
    """Fixed 256-bin intensity histogram over the observed min..max range.

    The last bin is right-closed so the maximum falls inside it.  A constant
    volume collapses to a single flagged bin.
    """

    bin_edges: np.ndarray
    counts: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        edges = np.ascontiguousarray(self.bin_edges, dtype=np.float64)
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if len(edges) != len(counts) + 1:
            raise ValueError("bin_edges must have one more entry than counts")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin_edges must be strictly increasing")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        edges.flags.writeable = False
        counts.flags.writeable = False
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def histogram(volume: ScalarVolume) -> Histogram:
    """256-bin histogram of all voxel intensities."""
    data = volume.linear_data()
    lo = float(data.min())
    hi = float(data.max())
    if lo == hi:
        return Histogram(
            np.array([lo, lo + 1.0]), np.array([data.size], dtype=np.int64), degenerate=True
        )
    counts, edges = np.histogram(data, bins=N_BINS, range=(lo, hi))
    return Histogram(edges, counts.astype(np.int64))


def otsu_threshold(h: Histogram) -> float:
    """Threshold minimizing intra-class variance over all 255 bin cuts.

    The returned value is the bin edge between the two classes; ties take
    the lowest cut.  Foreground is intensity > threshold.
    """
    if h.degenerate:
        raise ValueError("Otsu threshold is undefined for a degenerate histogram")
    counts = h.counts.astype(np.float64)
    centers = h.bin_centers()
    # minimizing intra-class variance == maximizing s0^2/n0 + s1^2/n1
    n0 = np.cumsum(counts)[:-1]
    s0 = np.cumsum(counts * centers)[:-1]
    n1 = counts.sum() - n0
    s1 = (counts * centers).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        score = s0 * s0 / n0 + s1 * s1 / n1
    score[(n0 == 0) | (n1 == 0)] = -np.inf
    if not np.isfinite(score).any():
        raise ValueError("histogram mass lies in a single bin; no valid Otsu cut")
    best = int(np.argmax(score))
    return float(h.bin_edges[best + 1])


# ---------------------------------------------------------------------------
# 1-D Gaussian mixture via EM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GmmConfig:
    n_components: int = 2
    max_iters: int = 200
    tol: float = 1e-6
    seed: int = 0
    # EM over full micro-CT-sized volumes is wasteful; fitting on a seeded
    # random subsample of this size changes the fit negligibly.
    max_samples: int = 1_000_000


@dataclass(frozen=True)
class GmmModel:
    """Fitted 1-D mixture: weights on the simplex, per-component mean/variance.

    ``log_likelihood_trace`` stores the mean log-likelihood per sample at
    each EM iteration and is nondecreasing within float tolerance.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood_trace: np.ndarray
    variance_floor: float
    degenerate: bool = False

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        m = np.ascontiguousarray(self.means, dtype=np.float64)
        v = np.ascontiguousarray(self.variances, dtype=np.float64)
        trace = np.ascontiguousarray(self.log_likelihood_trace, dtype=np.float64)
        if not (len(w) == len(m) == len(v)) or len(w) < 2:
            raise ValueError("weights, means and variances must share length >= 2")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        if not self.degenerate and np.any(v < self.variance_floor - 1e-15):
            raise ValueError("variances fall below the variance floor")
        if np.any(np.diff(trace) < -1e-7):
            raise ValueError("log-likelihood trace decreased beyond tolerance")
        for arr in (w, m, v, trace):
            arr.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "log_likelihood_trace", trace)

    @property
    def n_components(self) -> int:
        return len(self.weights)


def _mean_log_likelihood(x, weights, means, variances):
    log_pdf = (
        -0.5 * np.log(2.0 * np.pi * variances)[None, :]
        - 0.5 * (x[:, None] - means[None, :]) ** 2 / variances[None, :]
    )
    return logsumexp(log_pdf + np.log(weights)[None, :], axis=1)


def fit_gmm(samples, config: GmmConfig = GmmConfig()) -> GmmModel:
    """Fit a 1-D Gaussian mixture by EM with deterministic quantile init.

    Component i starts at the (i + 0.5)/N quantile with the global variance
    and uniform weights; iteration stops when the mean log-likelihood gain
    drops below ``tol`` or after ``max_iters``.  A variance floor of
    1e-6 x global variance prevents component collapse.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    n_comp = config.n_components
    if n_comp < 2:
        raise ValueError(f"n_components must be >= 2, got {n_comp}")
    if x.size < 10 * n_comp:
        raise ValueError(
            f"need at least {10 * n_comp} samples for {n_comp} components, got {x.size}"
        )
    global_var = float(x.var())
    if global_var == 0.0:
        value = float(x[0])
        return GmmModel(
            weights=np.full(n_comp, 1.0 / n_comp),
            means=np.full(n_comp, value),
            variances=np.full(n_comp, 1e-12),
            log_likelihood_trace=np.array([]),
            variance_floor=0.0,
            degenerate=True,
        )
    floor = 1e-6 * global_var
    quantiles = (np.arange(n_comp) + 0.5) / n_comp
    means = np.quantile(x, quantiles)
    variances = np.full(n_comp, global_var)
    weights = np.full(n_comp, 1.0 / n_comp)

    trace = []
    prev_ll = -np.inf
    for _ in range(config.max_iters):
        log_pdf = (
            -0.5 * np.log(2.0 * np.pi * variances)[None, :]
            - 0.5 * (x[:, None] - means[None, :]) ** 2 / variances[None, :]
        )
        log_joint = log_pdf + np.log(weights)[None, :]
        log_norm = logsumexp(log_joint, axis=1)
        ll = float(log_norm.mean())
        trace.append(ll)
        resp = np.exp(log_joint - log_norm[:, None])
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-300)
        means = (resp * x[:, None]).sum(axis=0) / nk
        variances = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk
        variances = np.maximum(variances, floor)
        weights = nk / x.size
        weights = weights / weights.sum()
        if ll - prev_ll < config.tol and np.isfinite(prev_ll):
            break
        prev_ll = ll
    return GmmModel(
        weights=weights,
        means=means,
        variances=variances,
        log_likelihood_trace=np.array(trace),
        variance_floor=floor,
    )


def gmm_threshold(model: GmmModel) -> float:
    """Equal weighted-density decision boundary of a two-component mixture.

    Solves w0*phi0(x) = w1*phi1(x) for the root strictly between the two
    means; if the quadratic has no such root, falls back to the midpoint of
    the means.  Foreground is intensity > threshold.
    """
    if model.n_components != 2:
        raise ValueError(
            f"threshold selection requires exactly 2 components, got {model.n_components}"
        )
    if model.degenerate or model.means[0] == model.means[1]:
        raise ValueError("component means coincide; no decision boundary exists")
    order = np.argsort(model.means)
    m0, m1 = model.means[order]
    v0, v1 = model.variances[order]
    w0, w1 = model.weights[order]
    # log w0 - 0.5 log v0 - (x-m0)^2/(2 v0) = log w1 - 0.5 log v1 - (x-m1)^2/(2 v1)
    a = 0.5 / v1 - 0.5 / v0
    b = m0 / v0 - m1 / v1
    c = (
        0.5 * m1 * m1 / v1
        - 0.5 * m0 * m0 / v0
        + np.log(w0)
        - np.log(w1)
        + 0.5 * np.log(v1)
        - 0.5 * np.log(v0)
    )
    midpoint = 0.5 * (m0 + m1)
    if a == 0.0:
        if b == 0.0:
            return float(midpoint)
        roots = np.array([-c / b])
    else:
        disc = b * b - 4.0 * a * c
        if disc < 0.0:
            return float(midpoint)
        sq = np.sqrt(disc)
        roots = np.array([(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)])
    between = roots[(roots > m0) & (roots < m1)]
    if between.size == 0:
        return float(midpoint)
    return float(between[0])


# ---------------------------------------------------------------------------
# Thresholding and region growing
# ---------------------------------------------------------------------------

def threshold_segment(
    volume: ScalarVolume, lower: float, upper: float = np.inf
) -> BinaryMask:
    """Band threshold: foreground iff lower < intensity <= upper."""
    if lower > upper:
        raise ValueError(f"lower must be <= upper, got lower={lower}, upper={upper}")
    bits = (volume.data > lower) & (volume.data <= upper)
    return BinaryMask(volume.geometry, bits)


@dataclass(frozen=True)
class RegionGrowConfig:
    seeds: tuple = ()
    tolerance: float = 0.0
    connectivity: int = 6

    def __post_init__(self):
        if self.connectivity not in (6, 26):
            raise ValueError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.tolerance < 0:
            raise ValueError(f"tolerance must be >= 0, got {self.tolerance}")
        object.__setattr__(
            self, "seeds", tuple(tuple(int(c) for c in s) for s in self.seeds)
        )


def region_grow(volume: ScalarVolume, config: RegionGrowConfig) -> BinaryMask:
    """Flood fill from seed voxels with statistics frozen at the seeds.

    A voxel joins iff |I(v) - mean(seed intensities)| <= tolerance and it is
    connected (6 or 26 neighborhood) to a seed through admissible voxels.
    Seeds that fail their own criterion contribute nothing (with a warning).
    """
    if not config.seeds:
        raise ValueError("region growing requires at least one seed")
    geom = volume.geometry
    for s in config.seeds:
        if len(s) != 3 or any(not 0 <= s[a] < geom.dims[a] for a in range(3)):
            raise ValueError(f"seed {s} is out of bounds for dims {geom.dims}")
    seed_vals = np.array([volume.data[s] for s in config.seeds], dtype=np.float64)
    mu = float(seed_vals.mean())
    admissible = np.abs(volume.data.astype(np.float64) - mu) <= config.tolerance
    seed_linear = []
    for s, val in zip(config.seeds, seed_vals):
        if abs(val - mu) <= config.tolerance:
            seed_linear.append(int(geom.linear_index(*s)))
        else:
            warnings.warn(
                f"seed {s} (intensity {val:g}) fails its own homogeneity "
                f"criterion |I - {mu:g}| <= {config.tolerance:g}; skipped",
                stacklevel=2,
            )
    if not seed_linear:
        return BinaryMask(geom, np.zeros(geom.dims, dtype=bool))
    nx, ny, nz = geom.dims
    out = active_kernels().flood_fill(
        np.ascontiguousarray(admissible.reshape(-1, order="F"), dtype=np.uint8),
        nx,
        ny,
        nz,
        np.asarray(sorted(seed_linear), dtype=np.int64),
        config.connectivity,
    )
    return BinaryMask(geom, out.astype(bool).reshape(geom.dims, order="F"))


# ---------------------------------------------------------------------------
# Method dispatch
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentationConfig:
    method: str = "otsu"
    gmm: GmmConfig = field(default_factory=GmmConfig)
    rg: RegionGrowConfig = field(default_factory=RegionGrowConfig)

    def __post_init__(self):
        if self.method not in ("otsu", "gmm", "region_growing"):
            raise ValueError(
                f"method must be otsu, gmm or region_growing, got {self.method!r}"
            )
        if self.method == "region_growing" and not self.rg.seeds:
            raise ValueError("region_growing requires a nonempty seed list")


def segment(volume: ScalarVolume, config: SegmentationConfig):
    """Run the configured segmenter; returns (mask, details for the report)."""
    if config.method == "otsu":
        t = otsu_threshold(histogram(volume))
        return threshold_segment(volume, t), {"threshold": t}
    if config.method == "gmm":
        data = volume.linear_data()
        if data.size > config.gmm.max_samples:
            rng = np.random.default_rng(config.gmm.seed)
            data = rng.choice(data, size=config.gmm.max_samples, replace=False)
        model = fit_gmm(data, config.gmm)
        t = gmm_threshold(model)
        return threshold_segment(volume, t), {
            "threshold": t,
            "gmm_weights": model.weights.tolist(),
            "gmm_means": model.means.tolist(),
            "gmm_variances": model.variances.tolist(),
            "gmm_iterations": len(model.log_likelihood_trace),
        }
    mask = region_grow(volume, config.rg)
    return mask, {
        "seeds": [list(s) for s in config.rg.seeds],
        "tolerance": config.rg.tolerance,
        "connectivity": config.rg.connectivity,
    }
