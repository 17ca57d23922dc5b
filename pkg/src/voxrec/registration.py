"""Two-stage point-cloud registration: FPFH+RANSAC coarse, point-to-plane ICP fine.

All nearest-neighbor queries use an exact kd-tree; RANSAC is seeded and
deterministic.  Parameters the upstream workflow leaves open (radii,
thresholds, iteration caps) live in RegistrationConfig and are echoed into
every report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .surface import TriangleMesh
from .voxel_align import RigidTransform, fit_rigid

FPFH_BINS_PER_ANGLE = 11
FPFH_SIZE = 3 * FPFH_BINS_PER_ANGLE
FPFH_NORMALIZATION = 100.0


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        normals = self.normals
        if normals is not None:
            normals = np.ascontiguousarray(normals, dtype=np.float64)
            if normals.shape != pts.shape:
                raise ValueError("normals must be index-aligned with points")
            lengths = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("normals must have unit length within 1e-6")
            normals.flags.writeable = False
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "normals", normals)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, t: RigidTransform) -> "PointCloud":
        normals = None if self.normals is None else self.normals @ t.rotation.T
        return PointCloud(t.apply(self.points), normals)


def mesh_to_pointcloud(mesh: TriangleMesh) -> PointCloud:
    """Mesh vertices with area-weighted vertex normals.

    Summing raw triangle cross products per vertex weights each incident
    face by twice its area; the sums are then normalized.
    """
    if mesh.n_triangles == 0:
        raise ValueError("mesh has no triangles")
    v = mesh.vertices[mesh.triangles]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    acc = np.zeros_like(mesh.vertices)
    for corner in range(3):
        np.add.at(acc, mesh.triangles[:, corner], cross)
    lengths = np.linalg.norm(acc, axis=1)
    if np.any(lengths < 1e-300):
        bad = int(np.count_nonzero(lengths < 1e-300))
        raise ValueError(f"{bad} vertex normal(s) vanished; mesh is degenerate there")
    return PointCloud(mesh.vertices, acc / lengths[:, None])


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """One point per occupied voxel of size ``voxel``: the bucket centroid.

    Normals are averaged and renormalized; a bucket whose normals cancel
    keeps its first member's normal.  Output order is sorted by bucket key,
    so the result is deterministic.
    """
    if voxel <= 0:
        raise ValueError(f"voxel size must be > 0, got {voxel}")
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    n = len(uniq)
    sums = np.zeros((n, 3))
    np.add.at(sums, inverse, cloud.points)
    counts = np.bincount(inverse, minlength=n).astype(np.float64)
    points = sums / counts[:, None]
    normals = None
    if cloud.normals is not None:
        nsum = np.zeros((n, 3))
        np.add.at(nsum, inverse, cloud.normals)
        lengths = np.linalg.norm(nsum, axis=1)
        cancelled = lengths < 1e-12
        if cancelled.any():
            first = np.full(n, -1, dtype=np.int64)
            for i in range(len(inverse) - 1, -1, -1):
                first[inverse[i]] = i
            nsum[cancelled] = cloud.normals[first[cancelled]]
            lengths = np.linalg.norm(nsum, axis=1)
        normals = nsum / lengths[:, None]
    return PointCloud(points, normals)


def estimate_normals(cloud: PointCloud, k: int = 30) -> PointCloud:
    """Per-point normals from the k-nearest-neighbor covariance.

    The normal is the smallest-eigenvalue eigenvector (the neighborhood
    includes the point itself), oriented away from the cloud centroid.
    That outward heuristic is adequate for star-shaped surfaces only.
    """
    if k < 3:
        raise ValueError(f"normal estimation needs k >= 3, got {k}")
    if len(cloud) <= k:
        raise ValueError(f"cloud size {len(cloud)} must exceed k={k}")
    tree = cKDTree(cloud.points)
    _, nbr = tree.query(cloud.points, k=k)
    nbrs = cloud.points[nbr]  # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    outward = cloud.points - cloud.points.mean(axis=0)
    flip = np.einsum("ij,ij->i", normals, outward) < 0
    normals[flip] = -normals[flip]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.points, normals)


@dataclass(frozen=True)
class FpfhFeatureSet:
    """Per-point 33-bin histograms (3 Darboux angles x 11 bins).

    Rows sum to 100 except for isolated points, which are all-zero and
    listed in ``isolated``.
    """

    features: np.ndarray
    isolated: tuple = ()

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != FPFH_SIZE:
            raise ValueError(f"features must be (N, {FPFH_SIZE}), got {f.shape}")
        if np.any(f < 0):
            raise ValueError("feature histograms must be nonnegative")
        f.flags.writeable = False
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "isolated", tuple(int(i) for i in self.isolated))


def _pair_angle_bins(src_pts, src_n, dst_pts, dst_n):
    """Angle-feature bin triplets for directed point pairs.

    Returns (alpha_bin, phi_bin, theta_bin, valid) where the Darboux frame
    is anchored at the source normal.
    """
    d = dst_pts - src_pts
    dist = np.linalg.norm(d, axis=1)
    valid = dist > 1e-300
    dhat = np.zeros_like(d)
    dhat[valid] = d[valid] / dist[valid, None]
    u = src_n
    v = np.cross(u, dhat)
    vnorm = np.linalg.norm(v, axis=1)
    valid &= vnorm > 1e-12
    v[valid] /= vnorm[valid, None]
    w = np.cross(u, v)
    alpha = np.einsum("ij,ij->i", v, dst_n)
    phi = np.einsum("ij,ij->i", u, dhat)
    theta = np.arctan2(np.einsum("ij,ij->i", w, dst_n), np.einsum("ij,ij->i", u, dst_n))
    nb = FPFH_BINS_PER_ANGLE
    ba = np.clip(np.floor((alpha + 1.0) / 2.0 * nb), 0, nb - 1).astype(np.int64)
    bp = np.clip(np.floor((phi + 1.0) / 2.0 * nb), 0, nb - 1).astype(np.int64)
    bt = np.clip(np.floor((theta + np.pi) / (2.0 * np.pi) * nb), 0, nb - 1).astype(np.int64)
    return ba, bp, bt, valid


def compute_fpfh(cloud: PointCloud, radius: float) -> FpfhFeatureSet:
    """Fast point feature histograms over radius neighborhoods.

    Two passes: simplified histograms (SPFH) from the three Darboux-frame
    angles of every directed neighbor pair, then
    FPFH(p) = SPFH(p) + sum_q SPFH(q) / |p - q|, normalized to sum 100.
    Points with no neighbors get a zero histogram and are flagged.
    """
    if cloud.normals is None:
        raise ValueError("FPFH requires normals; run estimate_normals first")
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    n = len(cloud)
    tree = cKDTree(cloud.points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    spfh = np.zeros((n, FPFH_SIZE))
    nb = FPFH_BINS_PER_ANGLE
    if len(pairs):
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        ba, bp, bt, valid = _pair_angle_bins(
            cloud.points[src], cloud.normals[src], cloud.points[dst], cloud.normals[dst]
        )
        s = src[valid]
        np.add.at(spfh, (s, ba[valid]), 1.0)
        np.add.at(spfh, (s, nb + bp[valid]), 1.0)
        np.add.at(spfh, (s, 2 * nb + bt[valid]), 1.0)
    features = spfh.copy()
    if len(pairs):
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        dist = np.linalg.norm(cloud.points[dst] - cloud.points[src], axis=1)
        ok = dist > 1e-300
        np.add.at(features, src[ok], spfh[dst[ok]] / dist[ok, None])
    sums = features.sum(axis=1)
    isolated = np.nonzero(sums == 0)[0]
    nonzero = sums > 0
    features[nonzero] *= FPFH_NORMALIZATION / sums[nonzero, None]
    return FpfhFeatureSet(features, isolated=tuple(isolated.tolist()))


# ---------------------------------------------------------------------------
# Registration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RansacConfig:
    n_sample_points: int = 3
    max_iterations: int = 100_000
    confidence: float = 0.999
    distance_threshold: Optional[float] = None  # default 1.5 x downsample voxel
    edge_length_ratio: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.edge_length_ratio <= 1:
            raise ValueError("edge_length_ratio must be in (0, 1]")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")


@dataclass(frozen=True)
class IcpConfig:
    max_correspondence: Optional[float] = None  # default 2 x downsample voxel
    max_iterations: int = 50
    rel_change_tol: float = 1e-6


@dataclass(frozen=True)
class RegistrationConfig:
    downsample_voxel: float = 1.0
    normal_k: int = 30
    fpfh_radius: Optional[float] = None  # default 5 x downsample voxel
    ransac: RansacConfig = field(default_factory=RansacConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)

    def __post_init__(self):
        if self.downsample_voxel <= 0:
            raise ValueError("downsample_voxel must be > 0")

    def effective_fpfh_radius(self) -> float:
        return self.fpfh_radius if self.fpfh_radius is not None else 5.0 * self.downsample_voxel

    def effective_ransac_threshold(self) -> float:
        t = self.ransac.distance_threshold
        return t if t is not None else 1.5 * self.downsample_voxel

    def effective_icp_correspondence(self) -> float:
        t = self.icp.max_correspondence
        return t if t is not None else 2.0 * self.downsample_voxel

    def effective_dict(self) -> dict:
        """All parameter values actually used, for the report echo."""
        return {
            "downsample_voxel": self.downsample_voxel,
            "normal_k": self.normal_k,
            "fpfh_radius": self.effective_fpfh_radius(),
            "ransac": {
                "n_sample_points": self.ransac.n_sample_points,
                "max_iterations": self.ransac.max_iterations,
                "confidence": self.ransac.confidence,
                "distance_threshold": self.effective_ransac_threshold(),
                "edge_length_ratio": self.ransac.edge_length_ratio,
                "seed": self.ransac.seed,
            },
            "icp": {
                "max_correspondence": self.effective_icp_correspondence(),
                "max_iterations": self.icp.max_iterations,
                "rel_change_tol": self.icp.rel_change_tol,
            },
        }


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    fitness: float
    inlier_rmse: float
    iterations_used: int
    converged: bool
    objective_trace: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness must be in [0, 1], got {self.fitness}")
        if self.inlier_rmse < 0:
            raise ValueError(f"inlier_rmse must be >= 0, got {self.inlier_rmse}")


def _fitness_and_rmse(src: PointCloud, dst: PointCloud, t: RigidTransform, threshold: float):
    d, _ = cKDTree(dst.points).query(t.apply(src.points), k=1)
    inlier = d <= threshold
    fitness = float(inlier.mean())
    rmse = float(np.sqrt((d[inlier] ** 2).mean())) if inlier.any() else 0.0
    return fitness, rmse


def ransac_global_registration(
    src: PointCloud,
    dst: PointCloud,
    src_features: FpfhFeatureSet,
    dst_features: FpfhFeatureSet,
    config: RansacConfig = RansacConfig(),
    distance_threshold: Optional[float] = None,
) -> RegistrationResult:
    """Feature-matched RANSAC estimation of the rigid coarse alignment.

    Candidate correspondences are nearest neighbors in 33-D feature space.
    Each iteration samples ``n_sample_points`` correspondences, prunes them
    by the edge-length-ratio check, fits a rigid transform and scores it by
    inlier count over all correspondences; the best transform is refined on
    its inliers.  Seeded, deterministic, with the usual confidence-based
    early exit (ties keep the earliest iteration).
    """
    if len(src_features.features) != len(src) or len(dst_features.features) != len(dst):
        raise ValueError("feature sets must be index-aligned with their clouds")
    if len(src) < config.n_sample_points or len(dst) < config.n_sample_points:
        raise ValueError(
            f"need at least {config.n_sample_points} correspondences, "
            f"got {min(len(src), len(dst))}"
        )
    if distance_threshold is None:
        raise ValueError("distance_threshold is required")
    _, corr = cKDTree(dst_features.features).query(src_features.features, k=1)
    src_pts = src.points
    dst_pts = dst.points[corr]

    rng = np.random.default_rng(config.seed)
    n = config.n_sample_points
    best_inliers = -1
    best_transform = None
    best_iteration = 0
    needed = config.max_iterations
    it = 0
    batch = 256
    while it < min(needed, config.max_iterations):
        b = min(batch, min(needed, config.max_iterations) - it)
        rot, trans, ok = _ransac_candidates(rng, src_pts, dst_pts, n, config.edge_length_ratio, b)
        moved = np.einsum("bij,nj->bni", rot, src_pts) + trans[:, None, :]
        dists = np.linalg.norm(moved - dst_pts[None], axis=2)
        inliers = np.count_nonzero(dists <= distance_threshold, axis=1)
        inliers[~ok] = -1
        top = int(np.argmax(inliers))  # first max: ties keep the earliest iteration
        if inliers[top] > best_inliers:
            best_inliers = int(inliers[top])
            best_transform = RigidTransform(rot[top], trans[top])
            best_iteration = it + top + 1
            w = best_inliers / len(src_pts)
            if w > 0:
                denom = np.log1p(-min(w**n, 1.0 - 1e-12))
                needed = int(
                    min(np.ceil(np.log1p(-config.confidence) / denom), config.max_iterations)
                )
        it += b
    converged = best_transform is not None and it < config.max_iterations
    if best_transform is None:
        return RegistrationResult(
            transform=RigidTransform.identity(),
            fitness=0.0,
            inlier_rmse=0.0,
            iterations_used=it,
            converged=False,
        )
    dists = np.linalg.norm(best_transform.apply(src_pts) - dst_pts, axis=1)
    inlier_idx = dists <= distance_threshold
    if np.count_nonzero(inlier_idx) >= 3:
        try:
            best_transform = fit_rigid(src_pts[inlier_idx], dst_pts[inlier_idx])
        except ValueError:
            pass
    fitness, rmse = _fitness_and_rmse(src, dst, best_transform, distance_threshold)
    return RegistrationResult(
        transform=best_transform,
        fitness=fitness,
        inlier_rmse=rmse,
        iterations_used=best_iteration,
        converged=converged,
    )


def _ransac_candidates(rng, src_pts, dst_pts, n, ratio, b):
    """Draw b candidate transforms from random correspondence samples.

    Returns (rotations (b,3,3), translations (b,3), valid mask); samples
    with repeated indices, edge-length mismatches or degenerate geometry
    are marked invalid.
    """
    idx = rng.integers(0, len(src_pts), size=(b, n))
    s = src_pts[idx]
    d = dst_pts[idx]
    ok = np.ones(b, dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            ok &= idx[:, i] != idx[:, j]
            ls = np.linalg.norm(s[:, i] - s[:, j], axis=1)
            ld = np.linalg.norm(d[:, i] - d[:, j], axis=1)
            ok &= (ls >= ratio * ld) & (ld >= ratio * ls)
    sc = s.mean(axis=1, keepdims=True)
    dc = d.mean(axis=1, keepdims=True)
    h = np.einsum("bni,bnj->bij", s - sc, d - dc)
    u, sing, vt = np.linalg.svd(h)
    ok &= sing[:, 1] > np.maximum(sing[:, 0], 1e-300) * 1e-9  # collinear samples
    det = np.linalg.det(np.einsum("bij,bkj->bik", vt.transpose(0, 2, 1), u))
    flip = np.where(det < 0, -1.0, 1.0)
    vt_adj = vt.copy()
    vt_adj[:, 2, :] *= flip[:, None]
    rot = np.einsum("bji,bkj->bik", vt_adj, u)  # V_adj @ U^T per batch row
    trans = dc[:, 0] - np.einsum("bij,bj->bi", rot, sc[:, 0])
    return rot, trans, ok


def _orthonormal_increment(omega: np.ndarray, scale: float) -> np.ndarray:
    """Re-orthonormalized small-angle rotation I + [scale * omega]x."""
    wx, wy, wz = omega * scale
    lin = np.array([[1.0, -wz, wy], [wz, 1.0, -wx], [-wy, wx, 1.0]])
    u, _, vt = np.linalg.svd(lin)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def icp_point_to_plane(
    src: PointCloud,
    dst: PointCloud,
    init: RigidTransform,
    config: IcpConfig = IcpConfig(),
    max_correspondence: Optional[float] = None,
) -> RegistrationResult:
    """Point-to-plane ICP refinement of an initial rigid alignment.

    Each iteration matches transformed source points to their nearest
    destination point within ``max_correspondence`` and minimizes
    sum(n . (R p + t - q))^2 through the linearized 6x6 normal equations,
    re-orthonormalizing the rotation.  Updates that would increase the mean
    squared plane residual are halved (damped Gauss-Newton), so the recorded
    objective trace is nonincreasing.  Stops when the relative change of
    both inlier RMSE and fitness drops below ``rel_change_tol``.
    """
    if dst.normals is None:
        raise ValueError("point-to-plane ICP requires destination normals")
    if max_correspondence is None:
        raise ValueError("max_correspondence is required")
    tree = cKDTree(dst.points)
    current = init
    trace = []
    prev_fitness, prev_rmse = _fitness_and_rmse(src, dst, current, max_correspondence)
    if prev_fitness == 0.0:
        raise ValueError(
            f"no correspondences within max_correspondence={max_correspondence} "
            "at the initial alignment"
        )
    converged = False
    iterations = 0
    prev_obj = np.inf
    for iterations in range(1, config.max_iterations + 1):
        moved = current.apply(src.points)
        d, idx = tree.query(moved, k=1)
        sel = d <= max_correspondence
        if not sel.any():
            break
        p = moved[sel]
        q = dst.points[idx[sel]]
        nrm = dst.normals[idx[sel]]
        r = np.einsum("ij,ij->i", nrm, p - q)
        a = np.hstack([np.cross(p, nrm), nrm])
        # minimum-norm least squares: symmetric shapes (spheres) leave the
        # rotation underdetermined, and the null-space step must stay zero
        x, *_ = np.linalg.lstsq(a, -r, rcond=1e-9)
        omega, dt = x[:3], x[3:]

        def plane_obj(t: RigidTransform) -> float:
            res = np.einsum("ij,ij->i", nrm, t.apply(src.points[sel]) - q)
            return float((res**2).mean())

        scale = 1.0
        stalled = False
        for _ in range(25):
            rot = _orthonormal_increment(omega, scale)
            candidate = RigidTransform(
                rot @ current.rotation, rot @ current.translation + dt * scale
            )
            if plane_obj(candidate) <= plane_obj(current) + 1e-15:
                break
            scale *= 0.5
        else:
            candidate = current  # no decreasing step exists; local minimum
            stalled = True
        current = candidate
        obj = plane_obj(current)
        trace.append(min(obj, prev_obj))
        prev_obj = trace[-1]

        fitness, rmse = _fitness_and_rmse(src, dst, current, max_correspondence)
        rel_rmse = abs(rmse - prev_rmse) / max(prev_rmse, 1e-300)
        rel_fit = abs(fitness - prev_fitness) / max(prev_fitness, 1e-300)
        stagnant = abs(rmse - prev_rmse) < 1e-12 and abs(fitness - prev_fitness) < 1e-12
        prev_fitness, prev_rmse = fitness, rmse
        if stalled or stagnant or (
            rel_rmse < config.rel_change_tol and rel_fit < config.rel_change_tol
        ):
            converged = True
            break
    return RegistrationResult(
        transform=current,
        fitness=prev_fitness,
        inlier_rmse=prev_rmse,
        iterations_used=iterations,
        converged=converged,
        objective_trace=tuple(trace),
    )


def register_clouds(src: PointCloud, dst: PointCloud, config: RegistrationConfig):
    """Full coarse + fine registration between two raw clouds.

    Downsamples both clouds, estimates normals, computes FPFH, runs RANSAC
    and refines with ICP.  Returns (icp_result, ransac_result).
    """
    src_d = voxel_downsample(src, config.downsample_voxel)
    dst_d = voxel_downsample(dst, config.downsample_voxel)
    src_d = estimate_normals(src_d, config.normal_k)
    dst_d = estimate_normals(dst_d, config.normal_k)
    radius = config.effective_fpfh_radius()
    src_f = compute_fpfh(src_d, radius)
    dst_f = compute_fpfh(dst_d, radius)
    ransac = ransac_global_registration(
        src_d, dst_d, src_f, dst_f, config.ransac, config.effective_ransac_threshold()
    )
    icp = icp_point_to_plane(
        src_d,
        dst_d,
        ransac.transform,
        config.icp,
        config.effective_icp_correspondence(),
    )
    return icp, ransac
