"""Voxel- and surface-based accuracy metrics.

Voxel metrics come from the per-voxel confusion tally of two masks on a
shared grid; surface metrics come from exact nearest-neighbor distances
between point clouds.  Metrics with a zero denominator return None (an
explicit undefined marker serialized as null), never a silent 0 or NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .volume import BinaryMask


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion_counts(pred: BinaryMask, ref: BinaryMask) -> ConfusionCounts:
    """Per-voxel tally of pred against ref; both grids must be aligned."""
    if pred.geometry != ref.geometry:
        raise ValueError(
            f"geometry mismatch: pred {pred.geometry} vs ref {ref.geometry}; "
            "align the voxel grids before comparing"
        )
    p = pred.bits
    r = ref.bits
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    tn = pred.geometry.voxel_count - tp - fp - fn
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def classification_metrics(c: ConfusionCounts):
    """(sensitivity, specificity, precision); None where the denominator is 0."""
    sens = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    spec = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    prec = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    return sens, spec, prec


def dice(c: ConfusionCounts) -> Optional[float]:
    """2|A n B| / (|A| + |B|); None when both masks are empty."""
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else None


def jaccard(c: ConfusionCounts) -> Optional[float]:
    """|A n B| / |A u B| (intersection over union); None when both empty."""
    denom = c.tp + c.fp + c.fn
    return c.tp / denom if denom else None


def volume_similarity(c: ConfusionCounts) -> Optional[float]:
    """1 - |FN - FP| / (2TP + FP + FN); alignment-independent volume match."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 - abs(c.fn - c.fp) / denom if denom else None


@dataclass(frozen=True)
class VoxelMetrics:
    sensitivity: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    dice: Optional[float]
    jaccard: Optional[float]
    volume_similarity: Optional[float]

    @classmethod
    def from_masks(cls, pred: BinaryMask, ref: BinaryMask) -> "VoxelMetrics":
        c = confusion_counts(pred, ref)
        sens, spec, prec = classification_metrics(c)
        return cls(
            sensitivity=sens,
            specificity=spec,
            precision=prec,
            dice=dice(c),
            jaccard=jaccard(c),
            volume_similarity=volume_similarity(c),
        )


# ---------------------------------------------------------------------------
# Surface distances
# ---------------------------------------------------------------------------

def nn_distances(a, b) -> np.ndarray:
    """Distance (mm) from each point of a to its nearest neighbor in b.

    Exact: backed by a kd-tree and identical to the quadratic brute force.
    """
    pa = _points_of(a, "a")
    pb = _points_of(b, "b")
    d, _ = cKDTree(pb).query(pa, k=1)
    return np.atleast_1d(d)


def _points_of(cloud, name: str) -> np.ndarray:
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)
    pts = np.atleast_2d(pts)
    if pts.size == 0:
        raise ValueError(f"point cloud {name!r} is empty")
    return pts


def chamfer(a, b) -> tuple[float, float]:
    """(squared, unsquared) chamfer distance.

    Squared form: mean over a of min squared distance to b, plus the same
    with a and b swapped (mm^2).  The unsquared companion replaces squared
    distances with distances (mm); both are reported because downstream
    consumers quote either convention.
    """
    dab = nn_distances(a, b)
    dba = nn_distances(b, a)
    sq = float((dab**2).mean() + (dba**2).mean())
    unsq = float(dab.mean() + dba.mean())
    return sq, unsq


def average_hausdorff(a, b) -> float:
    """Mean of the two directed average nearest-neighbor distances (mm)."""
    return float(0.5 * (nn_distances(a, b).mean() + nn_distances(b, a).mean()))


def rmse_surface(recon, ref) -> float:
    """Directed RMSE (mm): sqrt(mean squared NN distance recon -> ref)."""
    d = nn_distances(recon, ref)
    return float(np.sqrt((d**2).mean()))


@dataclass(frozen=True)
class SurfaceMetrics:
    chamfer_sq_mm2: float
    chamfer_mm: float
    ahd_mm: float
    rmse_mm: float

    @classmethod
    def from_clouds(cls, recon, ref) -> "SurfaceMetrics":
        sq, unsq = chamfer(recon, ref)
        return cls(
            chamfer_sq_mm2=sq,
            chamfer_mm=unsq,
            ahd_mm=average_hausdorff(recon, ref),
            rmse_mm=rmse_surface(recon, ref),
        )
