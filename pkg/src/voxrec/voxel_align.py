"""Grid-independent landmark extraction and rigid voxel-grid alignment.

Landmarks are the extremal foreground voxel centers along the principal
axes of the foreground covariance; two landmark sets in slot correspondence
feed a closed-form SVD rigid fit (rotation + translation, scale fixed at 1,
reflections forbidden).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import BinaryMask, GridGeometry

EIGENVALUE_TIE_REL_GAP = 1e-6


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation, with det(rotation) = +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(self.rotation, dtype=np.float64)
        t = np.ascontiguousarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation length 3")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1 (no reflection)")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def to_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """compose(T1, T2)(x) == T1(T2(x))."""
    return RigidTransform(t1.rotation @ t2.rotation, t1.rotation @ t2.translation + t1.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def euler_xyz_deg(angles_deg, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Rigid transform from intrinsic x-y-z Euler angles in degrees.

    R = Rx(a) @ Ry(b) @ Rz(c): rotate about x, then the new y, then the new z.
    """
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return RigidTransform(rx @ ry @ rz, np.asarray(translation, dtype=np.float64))


@dataclass(frozen=True)
class LandmarkSet:
    """Six extremal points (min/max per principal axis) plus the frame.

    ``points`` rows are ordered (axis0 min, axis0 max, axis1 min, axis1 max,
    axis2 min, axis2 max); ``axes`` rows are the right-handed orthonormal
    principal directions sorted by descending eigenvalue.
    """

    points: np.ndarray
    axes: np.ndarray
    centroid: np.ndarray
    isotropic: bool = False

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        axes = np.ascontiguousarray(self.axes, dtype=np.float64)
        centroid = np.ascontiguousarray(self.centroid, dtype=np.float64)
        if pts.shape != (6, 3):
            raise ValueError(f"points must be (6, 3), got {pts.shape}")
        if np.max(np.abs(axes @ axes.T - np.eye(3))) > 1e-9:
            raise ValueError("axes are not orthonormal within 1e-9")
        if np.linalg.det(axes) < 0:
            raise ValueError("axes must be right-handed")
        for arr in (pts, axes, centroid):
            arr.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "centroid", centroid)


def _fix_axis_signs(axes: np.ndarray) -> np.ndarray:
    """Flip each axis so its largest-magnitude component is positive."""
    out = axes.copy()
    for i in range(3):
        j = int(np.argmax(np.abs(out[i])))
        if out[i, j] < 0:
            out[i] = -out[i]
    return out


def pca_landmarks(mask: BinaryMask) -> LandmarkSet:
    """Extremal foreground voxel centers along the principal directions.

    Raises on rank-deficient foregrounds (fewer than 4 non-coplanar voxels).
    Near-equal eigenvalues (relative gap below 1e-6) make PCA directions
    arbitrary, e.g. for a sphere; the landmark frame then falls back to the
    grid axes and is flagged isotropic.
    """
    idx = np.argwhere(mask.bits)
    if len(idx) == 0:
        raise ValueError("mask has no foreground voxels (rank 0)")
    # argwhere returns C-order (k slowest); re-sort to linear x-fastest order
    # so extremal ties resolve to the lowest linear index deterministically
    order = np.lexsort((idx[:, 0], idx[:, 1], idx[:, 2]))
    idx = idx[order]
    centers = mask.geometry.index_to_world(idx)
    centroid = centers.mean(axis=0)
    centered = centers - centroid
    cov = centered.T @ centered / len(centered)
    evals, evecs = np.linalg.eigh(cov)
    evals = evals[::-1]
    axes = evecs.T[::-1]
    rank = int(np.sum(evals > max(evals[0], 1e-300) * 1e-12))
    if rank < 3:
        raise ValueError(
            f"foreground is rank-deficient (rank {rank}); need >= 4 non-coplanar voxels"
        )
    gaps = np.diff(evals[::-1])[::-1] / evals[0]  # (e0-e1, e1-e2) relative
    isotropic = bool(np.any(np.abs(gaps) < EIGENVALUE_TIE_REL_GAP))
    if isotropic:
        axes = np.eye(3)
    else:
        axes = _fix_axis_signs(axes)
        if np.linalg.det(axes) < 0:
            axes = axes.copy()
            axes[2] = -axes[2]  # handedness wins over the sign rule
    points = np.empty((6, 3))
    for a in range(3):
        proj = centered @ axes[a]
        points[2 * a] = centers[int(np.argmin(proj))]
        points[2 * a + 1] = centers[int(np.argmax(proj))]
    return LandmarkSet(points=points, axes=axes, centroid=centroid, isotropic=isotropic)


def kabsch_umeyama(src: LandmarkSet, dst: LandmarkSet) -> RigidTransform:
    """Least-squares rigid motion mapping src landmarks onto dst landmarks.

    Correspondence is by landmark slot.  SVD of the cross-covariance with a
    determinant-sign correction forbids reflections; scale is fixed at 1.
    """
    return fit_rigid(src.points, dst.points)


def fit_rigid(src_points, dst_points) -> RigidTransform:
    """Kabsch-Umeyama fit between corresponding point rows."""
    p = np.asarray(src_points, dtype=np.float64)
    q = np.asarray(dst_points, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3 or len(p) < 3:
        raise ValueError("need matching (N, 3) point sets with N >= 3")
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    h = (p - pc).T @ (q - qc)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= max(s[0], 1e-300) * 1e-12:
        raise ValueError("landmark sets are degenerate (collinear); rigid fit is ill-posed")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    # exact orthonormalization guards against accumulated SVD roundoff
    uu, _, vvt = np.linalg.svd(rot)
    rot = uu @ vvt
    trans = qc - rot @ pc
    return RigidTransform(rot, trans)


def apply_rigid_to_mask(
    mask: BinaryMask, transform: RigidTransform, target_geometry: GridGeometry
) -> BinaryMask:
    """Resample a mask under a rigid motion with nearest-neighbor lookup.

    Output voxel at world point p is foreground iff T^-1(p) rounds to a
    foreground voxel of the input; samples outside the input grid are
    background.  Nearest-neighbor keeps the output strictly binary.
    """
    inv = invert(transform)
    src_geom = mask.geometry
    nx, ny, nz = target_geometry.dims
    out = np.zeros(target_geometry.dims, dtype=bool, order="F")
    xs = target_geometry.origin[0] + target_geometry.spacing[0] * np.arange(nx)
    ys = target_geometry.origin[1] + target_geometry.spacing[1] * np.arange(ny)
    # chunk over z to bound the transient (nx, ny, chunk, 3) float arrays
    chunk = max(1, int(2**22 // max(nx * ny, 1)))
    for z0 in range(0, nz, chunk):
        z1 = min(z0 + chunk, nz)
        zs = target_geometry.origin[2] + target_geometry.spacing[2] * np.arange(z0, z1)
        pts = np.empty((nx, ny, z1 - z0, 3))
        pts[..., 0] = xs[:, None, None]
        pts[..., 1] = ys[None, :, None]
        pts[..., 2] = zs[None, None, :]
        src = inv.apply(pts.reshape(-1, 3))
        idx = np.rint(src_geom.world_to_index(src)).astype(np.int64)
        valid = np.all((idx >= 0) & (idx < np.asarray(src_geom.dims)), axis=1)
        vals = np.zeros(len(idx), dtype=bool)
        vi = idx[valid]
        vals[valid] = mask.bits[vi[:, 0], vi[:, 1], vi[:, 2]]
        out[:, :, z0:z1] = vals.reshape(nx, ny, z1 - z0)
    return BinaryMask(target_geometry, out)
