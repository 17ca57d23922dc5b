"""Pure numpy/scipy implementations of the hot kernels.

These are the fallback selected when the compiled extension is missing.
Both backends must produce bit-identical outputs: the inner arithmetic is
written with the same expression order as the Cython version.
"""

import numpy as np
from scipy import ndimage

from .._mc_tables import EDGE_GRID_OFFSET, TRI_COUNTS, TRI_TABLE

BACKEND_NAME = "python"


def _edge_sign(py, pz, qy, qz, ty, tz):
    """Side of the perturbed ray point (ty+eps, tz+eps^2) w.r.t. edge P->Q.

    Primary term is the 2D cross product; exact float zeros fall through to
    the symbolic perturbation terms, so lattice-aligned geometry resolves
    deterministically.
    """
    s = (qy - py) * (tz - pz) - (qz - pz) * (ty - py)
    primary = np.sign(s)
    secondary = np.sign(-(qz - pz))
    tertiary = np.sign(qy - py)
    out = np.where(primary != 0, primary, np.where(secondary != 0, secondary, tertiary))
    return out


def ray_parity_voxelize(tri_xyz: np.ndarray, nx: int, ny: int, nz: int) -> np.ndarray:
    """Parity-fill voxelization of triangles given in index coordinates.

    For every (j, k) lattice column, each triangle whose (y, z) projection
    strictly contains the (symbolically perturbed) column point contributes
    one +x ray crossing; voxel (i, j, k) is foreground iff the number of
    crossings at x <= i is odd.

    Returns a Fortran-ordered bool array of shape (nx, ny, nz).
    """
    increments = np.zeros((nx, ny, nz), dtype=np.int32, order="F")
    for tri in tri_xyz:
        a, b, c = tri
        j0 = max(int(np.ceil(min(a[1], b[1], c[1]))), 0)
        j1 = min(int(np.floor(max(a[1], b[1], c[1]))), ny - 1)
        k0 = max(int(np.ceil(min(a[2], b[2], c[2]))), 0)
        k1 = min(int(np.floor(max(a[2], b[2], c[2]))), nz - 1)
        if j0 > j1 or k0 > k1:
            continue
        ty = np.arange(j0, j1 + 1, dtype=np.float64)[:, None]
        tz = np.arange(k0, k1 + 1, dtype=np.float64)[None, :]
        s1 = _edge_sign(a[1], a[2], b[1], b[2], ty, tz)
        s2 = _edge_sign(b[1], b[2], c[1], c[2], ty, tz)
        s3 = _edge_sign(c[1], c[2], a[1], a[2], ty, tz)
        hit = (s1 == s2) & (s2 == s3) & (s1 != 0)
        if not hit.any():
            continue
        denom = (b[1] - a[1]) * (c[2] - a[2]) - (b[2] - a[2]) * (c[1] - a[1])
        beta = ((ty - a[1]) * (c[2] - a[2]) - (tz - a[2]) * (c[1] - a[1])) / denom
        gamma = ((b[1] - a[1]) * (tz - a[2]) - (b[2] - a[2]) * (ty - a[1])) / denom
        x = a[0] + beta * (b[0] - a[0]) + gamma * (c[0] - a[0])
        hj, hk = np.nonzero(hit)
        xi = np.ceil(x[hj, hk]).astype(np.int64)
        np.maximum(xi, 0, out=xi)
        keep = xi <= nx - 1
        np.add.at(increments, (xi[keep], hj[keep] + j0, hk[keep] + k0), 1)
    counts = np.cumsum(increments, axis=0)
    return np.asfortranarray((counts & 1).astype(bool))


def marching_cubes(data_linear: np.ndarray, nx: int, ny: int, nz: int, iso: float):
    """Extract the iso-surface of an x-fastest linear scalar grid.

    Returns (vertices, triangles): vertices are float64 (V, 3) in index
    coordinates with one shared vertex per crossed grid edge, triangles are
    int64 (M, 3) oriented outward from the > iso region.
    """
    vol = data_linear.reshape((nx, ny, nz), order="F")
    inside = vol > iso
    cfg = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint8, order="F")
    # corner c of cell (i,j,k) sits at (i,j,k) + CORNER_POS[c]
    corner = [
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ]
    for c, (dx, dy, dz) in enumerate(corner):
        cfg |= inside[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz] << np.uint8(c)
    cfg_flat = cfg.reshape(-1, order="F")
    active = np.nonzero((cfg_flat != 0) & (cfg_flat != 255))[0]
    if active.size == 0:
        return np.empty((0, 3), dtype=np.float64), np.empty((0, 3), dtype=np.int64)

    cfg_act = cfg_flat[active]
    nent = 3 * TRI_COUNTS[cfg_act].astype(np.int64)
    rows = TRI_TABLE[cfg_act]
    entry_mask = np.arange(TRI_TABLE.shape[1])[None, :] < nent[:, None]
    edges = rows[entry_mask].astype(np.int64)  # row-major: cell order preserved
    cell_of_entry = np.repeat(active, nent)

    cx = cell_of_entry % (nx - 1)
    cy = (cell_of_entry // (nx - 1)) % (ny - 1)
    cz = cell_of_entry // ((nx - 1) * (ny - 1))
    off = EDGE_GRID_OFFSET[edges]
    gi = cx + off[:, 0]
    gj = cy + off[:, 1]
    gk = cz + off[:, 2]
    gid = 3 * (gi + nx * (gj + ny * gk)) + off[:, 3]

    uniq, inv = np.unique(gid, return_inverse=True)
    triangles = inv.reshape(-1, 3).astype(np.int64)

    axis = uniq % 3
    lin0 = uniq // 3
    strides = np.array([1, nx, nx * ny], dtype=np.int64)
    lin1 = lin0 + strides[axis]
    v0 = data_linear[lin0]
    v1 = data_linear[lin1]
    t = (iso - v0) / (v1 - v0)

    verts = np.empty((uniq.size, 3), dtype=np.float64)
    verts[:, 0] = lin0 % nx
    verts[:, 1] = (lin0 // nx) % ny
    verts[:, 2] = lin0 // (nx * ny)
    verts[np.arange(uniq.size), axis] += t
    return verts, triangles


def flood_fill(
    admissible: np.ndarray, nx: int, ny: int, nz: int, seeds: np.ndarray, connectivity: int
) -> np.ndarray:
    """Union of connected components of the admissible set containing seeds.

    ``admissible`` and the returned mask are uint8, x-fastest linear layout;
    seeds are linear indices.  Seeds on inadmissible voxels contribute
    nothing.
    """
    grid = admissible.reshape((nx, ny, nz), order="F").astype(bool)
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labels, _ = ndimage.label(grid, structure=structure)
    labels_flat = labels.reshape(-1, order="F")
    seed_labels = np.unique(labels_flat[seeds])
    seed_labels = seed_labels[seed_labels > 0]
    out = np.isin(labels_flat, seed_labels)
    return out.astype(np.uint8)
