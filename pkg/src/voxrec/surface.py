"""Isosurface extraction and mesh utilities.

Marching cubes runs on the kernel backend (compiled or numpy); this module
owns the mesh value type, Laplacian smoothing and the mesh bookkeeping used
by tests and the pipeline (area, volume, Euler characteristic).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import active_kernels
from .volume import BinaryMask, GridGeometry, ScalarVolume


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle surface in world coordinates (mm)."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {verts.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValueError(f"triangles must be (M, 3), got {tris.shape}")
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle indices out of range")
        tris = _drop_degenerate(verts, tris)
        normals = self.normals
        if normals is not None:
            normals = np.ascontiguousarray(normals, dtype=np.float64)
            if normals.shape != verts.shape:
                raise ValueError("normals must match vertices in shape")
            lengths = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("vertex normals must have unit length")
            normals.flags.writeable = False
        verts.flags.writeable = False
        tris.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "normals", normals)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def edges(self) -> np.ndarray:
        """Unique undirected edges, (E, 2) with lower index first."""
        e = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def boundary_edge_count(self) -> int:
        """Edges used by exactly one triangle (0 means watertight)."""
        e = np.concatenate(
            [self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]]
        )
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.count_nonzero(counts == 1))


def _drop_degenerate(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    if tris.size == 0:
        return tris
    distinct = (
        (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    )
    tris = tris[distinct]
    if tris.size == 0:
        return tris
    v = verts[tris]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    area2 = np.einsum("ij,ij->i", cross, cross)
    return np.ascontiguousarray(tris[area2 > 0.0])


def marching_cubes(volume, iso: float | None = None) -> TriangleMesh:
    """Standard 256-case marching cubes with linear edge interpolation.

    Accepts a ScalarVolume or a BinaryMask (lifted to {0, 1} scalars with a
    default iso of 0.5).  Vertices on shared grid edges are welded, so the
    output is structurally watertight whenever the foreground stays off the
    grid boundary.  An iso level outside the data range yields an empty mesh
    with a warning.
    """
    if isinstance(volume, BinaryMask):
        data = volume.linear_bits().astype(np.float64)
        iso = 0.5 if iso is None else float(iso)
    elif isinstance(volume, ScalarVolume):
        if iso is None:
            raise ValueError("iso level is required for scalar volumes")
        data = volume.linear_data().astype(np.float64)
        iso = float(iso)
    else:
        raise TypeError(f"expected ScalarVolume or BinaryMask, got {type(volume)}")
    geometry = volume.geometry
    nx, ny, nz = geometry.dims
    if min(nx, ny, nz) < 2:
        raise ValueError(f"marching cubes needs a grid of at least 2x2x2, got {geometry.dims}")
    if not (data.min() < iso < data.max()):
        warnings.warn(
            f"iso level {iso} is outside the data range "
            f"[{data.min()}, {data.max()}]; returning an empty mesh",
            stacklevel=2,
        )
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    verts_idx, tris = active_kernels().marching_cubes(data, nx, ny, nz, iso)
    verts = np.asarray(geometry.origin) + verts_idx * np.asarray(geometry.spacing)
    return TriangleMesh(verts, tris)


def laplacian_smooth(mesh: TriangleMesh, lam: float, iterations: int) -> TriangleMesh:
    """Jacobi-style Laplacian smoothing: v <- v + lam * (mean(1-ring) - v).

    All vertices move simultaneously from the previous iteration's
    positions, so the result does not depend on traversal order.
    Connectivity is unchanged.
    """
    if not 0 < lam <= 1:
        raise ValueError(f"smoothing factor must be in (0, 1], got {lam}")
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    if mesh.n_triangles < 1:
        raise ValueError("mesh must have at least one triangle")
    edges = mesh.edges()
    nbr_from = np.concatenate([edges[:, 0], edges[:, 1]])
    nbr_to = np.concatenate([edges[:, 1], edges[:, 0]])
    degree = np.bincount(nbr_from, minlength=mesh.n_vertices).astype(np.float64)
    isolated = degree == 0
    degree[isolated] = 1.0
    pos = mesh.vertices.copy()
    for _ in range(iterations):
        sums = np.zeros_like(pos)
        np.add.at(sums, nbr_from, pos[nbr_to])
        mean = sums / degree[:, None]
        mean[isolated] = pos[isolated]
        pos = pos + lam * (mean - pos)
    return TriangleMesh(pos, mesh.triangles, normals=mesh.normals)


def mesh_stats(mesh: TriangleMesh) -> dict:
    """Surface area, signed enclosed volume, boundary edges and Euler number.

    Signed volume sums tetrahedra against the origin and is positive for
    outward-oriented closed surfaces.
    """
    v = mesh.vertices[mesh.triangles] if mesh.n_triangles else np.empty((0, 3, 3))
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    area = 0.5 * np.linalg.norm(cross, axis=1).sum()
    volume = np.einsum("ij,ij->i", v[:, 0], cross).sum() / 6.0
    n_edges = len(mesh.edges())
    euler = mesh.n_vertices - n_edges + mesh.n_triangles
    return {
        "area_mm2": float(area),
        "signed_volume_mm3": float(volume),
        "boundary_edge_count": mesh.boundary_edge_count(),
        "euler_characteristic": int(euler),
    }


# ---------------------------------------------------------------------------
# Parametric meshes (reference models and fixtures)
# ---------------------------------------------------------------------------

def icosphere_mesh(radius: float, center=(0.0, 0.0, 0.0), subdivisions: int = 3) -> TriangleMesh:
    """Geodesic sphere from a subdivided icosahedron, outward-oriented."""
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    tris = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(map(tuple, verts))
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.asarray(verts[i]) + np.asarray(verts[j])
                m /= np.linalg.norm(m)
                cache[key] = len(verts)
                verts.append(tuple(m))
            return cache[key]

        new_tris = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_tris += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        tris = new_tris
    points = np.asarray(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(points, np.asarray(tris, dtype=np.int64))


def box_mesh(lo, hi) -> TriangleMesh:
    """Axis-aligned box from corner ``lo`` to corner ``hi``, outward-oriented."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError(f"box corners must satisfy hi > lo, got lo={lo}, hi={hi}")
    corners = np.array(
        [
            (lo[0], lo[1], lo[2]), (hi[0], lo[1], lo[2]),
            (hi[0], hi[1], lo[2]), (lo[0], hi[1], lo[2]),
            (lo[0], lo[1], hi[2]), (hi[0], lo[1], hi[2]),
            (hi[0], hi[1], hi[2]), (lo[0], hi[1], hi[2]),
        ]
    )
    quads = [
        (0, 3, 2, 1),  # z = lo
        (4, 5, 6, 7),  # z = hi
        (0, 1, 5, 4),  # y = lo
        (2, 3, 7, 6),  # y = hi
        (0, 4, 7, 3),  # x = lo
        (1, 2, 6, 5),  # x = hi
    ]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, np.asarray(tris, dtype=np.int64))
