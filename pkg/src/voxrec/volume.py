"""Voxel-grid value types, synthetic phantoms and mesh voxelization.

Grid convention used throughout the package: a ``GridGeometry`` places the
center of voxel (0, 0, 0) at ``origin`` and voxel (i, j, k) at
``origin + (i*sx, j*sy, k*sz)``.  Dense arrays are stored Fortran-ordered
with shape ``dims`` so that ``data[i, j, k]`` addresses voxel (i, j, k)
while the flat memory buffer runs x-fastest
(``linear = i + nx * (j + ny * k)``), which is also the on-disk order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import active_kernels

INT16_MIN = -32768
INT16_MAX = 32767


@dataclass(frozen=True)
class GridGeometry:
    """Shape, physical spacing (mm/voxel) and world origin of a voxel grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("dims, spacing and origin must all have length 3")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"all spacing entries must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def world_center(self) -> np.ndarray:
        """World coordinate of the center of the voxel-center lattice."""
        d = np.asarray(self.dims, dtype=np.float64)
        s = np.asarray(self.spacing, dtype=np.float64)
        return np.asarray(self.origin) + (d - 1.0) / 2.0 * s

    def index_to_world(self, indices) -> np.ndarray:
        """Map (N, 3) voxel indices to world coordinates of voxel centers."""
        idx = np.asarray(indices, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_index(self, points) -> np.ndarray:
        """Inverse of :meth:`index_to_world`; returns fractional indices."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def linear_index(self, i, j, k):
        """x-fastest linear index of voxel (i, j, k)."""
        nx, ny, _ = self.dims
        return i + nx * (j + ny * np.asarray(k))

    def unravel(self, linear):
        """Inverse of :meth:`linear_index`."""
        nx, ny, _ = self.dims
        linear = np.asarray(linear)
        i = linear % nx
        j = (linear // nx) % ny
        k = linear // (nx * ny)
        return i, j, k

    def center_lattice(self) -> np.ndarray:
        """(nx, ny, nz, 3) array of world coordinates of all voxel centers."""
        axes = [
            self.origin[a] + self.spacing[a] * np.arange(self.dims[a], dtype=np.float64)
            for a in range(3)
        ]
        xs, ys, zs = np.meshgrid(*axes, indexing="ij")
        return np.stack([xs, ys, zs], axis=-1)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.asfortranarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ScalarVolume:
    """Dense int16 intensity grid (the DICOM stand-in)."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.int16:
            raise ValueError(f"ScalarVolume data must be int16, got {data.dtype}")
        if data.shape != self.geometry.dims:
            raise ValueError(
                f"data shape {data.shape} does not match dims {self.geometry.dims}"
            )
        object.__setattr__(self, "data", _freeze(data))

    def linear_data(self) -> np.ndarray:
        """Flat view in x-fastest order (matches the on-disk layout)."""
        return self.data.reshape(-1, order="F")


@dataclass(frozen=True)
class BinaryMask:
    """Dense boolean occupancy grid sharing ScalarVolume geometry."""

    geometry: GridGeometry
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.dtype != np.bool_:
            raise ValueError(f"BinaryMask bits must be bool, got {bits.dtype}")
        if bits.shape != self.geometry.dims:
            raise ValueError(
                f"bits shape {bits.shape} does not match dims {self.geometry.dims}"
            )
        object.__setattr__(self, "bits", _freeze(bits))

    def linear_bits(self) -> np.ndarray:
        return self.bits.reshape(-1, order="F")

    @property
    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.bits))


def foreground_fraction(mask: BinaryMask) -> float:
    """Fraction of voxels set, in [0, 1]."""
    return mask.foreground_count / mask.geometry.voxel_count


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------

def _radial_distance(geometry: GridGeometry) -> np.ndarray:
    """Distance (mm) from every voxel center to the grid center, F-ordered."""
    center = geometry.world_center()
    axes = [
        geometry.origin[a]
        + geometry.spacing[a] * np.arange(geometry.dims[a], dtype=np.float64)
        - center[a]
        for a in range(3)
    ]
    # sum of squares via broadcasting keeps memory at one float64 grid
    d2 = (
        axes[0][:, None, None] ** 2
        + axes[1][None, :, None] ** 2
        + axes[2][None, None, :] ** 2
    )
    return np.sqrt(d2, out=d2)


def _check_margin(geometry: GridGeometry, radius: float, what: str) -> None:
    for a in range(3):
        half_extent = (geometry.dims[a] - 1) / 2.0 * geometry.spacing[a]
        if radius + 2.0 * geometry.spacing[a] > half_extent:
            raise ValueError(
                f"{what} of radius {radius} mm does not fit in the grid with a "
                f"2-voxel margin along axis {a} "
                f"(half extent {half_extent:.4g} mm, spacing {geometry.spacing[a]} mm)"
            )


def make_sphere_mask(radius: float, geometry: GridGeometry) -> BinaryMask:
    """Ground-truth solid sphere centered at the grid center.

    A voxel is foreground iff its center lies within ``radius`` of the grid
    center (boundary inclusive).
    """
    if radius <= 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    _check_margin(geometry, radius, "sphere")
    return BinaryMask(geometry, _radial_distance(geometry) <= radius)


def make_shell_mask(outer_radius: float, wall: float, geometry: GridGeometry) -> BinaryMask:
    """Ground-truth hollow shell: outer_radius - wall <= |c - center| <= outer_radius."""
    if not 0 < wall < outer_radius:
        raise ValueError(
            f"wall must satisfy 0 < wall < outer_radius, got wall={wall}, "
            f"outer_radius={outer_radius}"
        )
    _check_margin(geometry, outer_radius, "shell")
    r = _radial_distance(geometry)
    return BinaryMask(geometry, (r >= outer_radius - wall) & (r <= outer_radius))


def _render_phantom(
    mask: BinaryMask,
    fg_mean: float,
    bg_mean: float,
    noise_sigma: float,
    seed: int,
) -> ScalarVolume:
    if fg_mean == bg_mean:
        raise ValueError("fg_mean and bg_mean must differ")
    values = np.where(mask.bits, float(fg_mean), float(bg_mean))
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        # draw in linear (x-fastest) order so the result is layout-independent
        noise = rng.normal(0.0, noise_sigma, mask.geometry.voxel_count)
        values = values + noise.reshape(mask.geometry.dims, order="F")
    np.rint(values, out=values)
    np.clip(values, INT16_MIN, INT16_MAX, out=values)
    return ScalarVolume(mask.geometry, values.astype(np.int16))


def make_sphere_phantom(
    radius: float,
    geometry: GridGeometry,
    fg_mean: float,
    bg_mean: float,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> ScalarVolume:
    """Solid-sphere intensity phantom: two plateaus plus i.i.d. Gaussian noise.

    Deterministic for a fixed seed; the noise-free ground truth is
    :func:`make_sphere_mask` with the same radius and geometry.
    """
    return _render_phantom(
        make_sphere_mask(radius, geometry), fg_mean, bg_mean, noise_sigma, seed
    )


def make_shell_phantom(
    outer_radius: float,
    wall: float,
    geometry: GridGeometry,
    fg_mean: float,
    bg_mean: float,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> ScalarVolume:
    """Thin-walled hollow sphere phantom (the class-imbalance stand-in)."""
    return _render_phantom(
        make_shell_mask(outer_radius, wall, geometry), fg_mean, bg_mean, noise_sigma, seed
    )


# ---------------------------------------------------------------------------
# Mesh rasterization
# ---------------------------------------------------------------------------

def voxelize_mesh(mesh, geometry: GridGeometry) -> BinaryMask:
    """Rasterize a watertight triangle mesh onto a voxel grid.

    A voxel is foreground iff its center lies inside the closed surface,
    decided by parity of ray crossings along +x.  Ray/edge and ray/vertex
    ties are broken by a fixed symbolic perturbation of the ray origin, so
    the result is deterministic for any input.
    """
    boundary = mesh.boundary_edge_count()
    if boundary != 0:
        raise ValueError(
            f"mesh is not watertight: {boundary} boundary edge(s); "
            "voxelization requires every edge shared by exactly two triangles"
        )
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    grid_lo = np.asarray(geometry.origin) - 0.5 * np.asarray(geometry.spacing)
    grid_hi = (
        np.asarray(geometry.origin)
        + (np.asarray(geometry.dims) - 0.5) * np.asarray(geometry.spacing)
    )
    if np.any(lo < grid_lo) or np.any(hi > grid_hi):
        raise ValueError(
            f"mesh bounding box [{lo}, {hi}] exceeds grid world extent "
            f"[{grid_lo}, {grid_hi}]"
        )
    tri_xyz = geometry.world_to_index(mesh.vertices)[mesh.triangles]
    nx, ny, nz = geometry.dims
    bits = active_kernels().ray_parity_voxelize(
        np.ascontiguousarray(tri_xyz, dtype=np.float64), nx, ny, nz
    )
    return BinaryMask(geometry, bits)
