# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython implementations of the hot kernels.

Must stay bit-identical to voxrec.kernels._python: same expression order in
every float computation, same canonical orderings (x-fastest linear ids for
welded vertices, cell order for triangles).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, floor

from .._mc_tables import EDGE_GRID_OFFSET, TRI_COUNTS, TRI_TABLE

cnp.import_array()

BACKEND_NAME = "compiled"

_EDGE_GRID_OFFSET = np.ascontiguousarray(EDGE_GRID_OFFSET, dtype=np.int64)
_TRI_TABLE = np.ascontiguousarray(TRI_TABLE, dtype=np.int8)
_TRI_COUNTS = np.ascontiguousarray(TRI_COUNTS, dtype=np.int8)


cdef inline double _sign(double x) noexcept nogil:
    if x > 0.0:
        return 1.0
    elif x < 0.0:
        return -1.0
    return 0.0


cdef inline double _edge_sign_c(double py, double pz, double qy, double qz,
                                double ty, double tz) noexcept nogil:
    cdef double s = (qy - py) * (tz - pz) - (qz - pz) * (ty - py)
    cdef double primary = _sign(s)
    cdef double secondary
    if primary != 0.0:
        return primary
    secondary = _sign(-(qz - pz))
    if secondary != 0.0:
        return secondary
    return _sign(qy - py)


def ray_parity_voxelize(cnp.ndarray[cnp.float64_t, ndim=3] tri_xyz,
                        int nx, int ny, int nz):
    """Parity voxelization; see the python backend for the contract."""
    cdef cnp.ndarray[cnp.int32_t, ndim=3] increments = np.zeros(
        (nz, ny, nx), dtype=np.int32)
    cdef Py_ssize_t t, j, k
    cdef long j0, j1, k0, k1, xi
    cdef double ay, az, by, bz, cy, cz, ax, bx, cx
    cdef double miny, maxy, minz, maxz
    cdef double ty, tz, s1, s2, s3, denom, beta, gamma, x
    cdef Py_ssize_t ntri = tri_xyz.shape[0]

    for t in range(ntri):
        ax = tri_xyz[t, 0, 0]; ay = tri_xyz[t, 0, 1]; az = tri_xyz[t, 0, 2]
        bx = tri_xyz[t, 1, 0]; by = tri_xyz[t, 1, 1]; bz = tri_xyz[t, 1, 2]
        cx = tri_xyz[t, 2, 0]; cy = tri_xyz[t, 2, 1]; cz = tri_xyz[t, 2, 2]
        miny = min(ay, min(by, cy)); maxy = max(ay, max(by, cy))
        minz = min(az, min(bz, cz)); maxz = max(az, max(bz, cz))
        j0 = <long>ceil(miny)
        if j0 < 0:
            j0 = 0
        j1 = <long>floor(maxy)
        if j1 > ny - 1:
            j1 = ny - 1
        k0 = <long>ceil(minz)
        if k0 < 0:
            k0 = 0
        k1 = <long>floor(maxz)
        if k1 > nz - 1:
            k1 = nz - 1
        if j0 > j1 or k0 > k1:
            continue
        denom = (by - ay) * (cz - az) - (bz - az) * (cy - ay)
        for j in range(j0, j1 + 1):
            ty = <double>j
            for k in range(k0, k1 + 1):
                tz = <double>k
                s1 = _edge_sign_c(ay, az, by, bz, ty, tz)
                s2 = _edge_sign_c(by, bz, cy, cz, ty, tz)
                s3 = _edge_sign_c(cy, cz, ay, az, ty, tz)
                if s1 == 0.0 or s1 != s2 or s2 != s3:
                    continue
                beta = ((ty - ay) * (cz - az) - (tz - az) * (cy - ay)) / denom
                gamma = ((by - ay) * (tz - az) - (bz - az) * (ty - ay)) / denom
                x = ax + beta * (bx - ax) + gamma * (cx - ax)
                xi = <long>ceil(x)
                if xi < 0:
                    xi = 0
                if xi <= nx - 1:
                    increments[k, j, xi] += 1
    counts = np.cumsum(increments, axis=2)
    return np.asfortranarray(((counts & 1) != 0).T)


def marching_cubes(cnp.ndarray[cnp.float64_t, ndim=1] data_linear,
                   int nx, int ny, int nz, double iso):
    """Iso-surface extraction; see the python backend for the contract."""
    cdef cnp.ndarray[cnp.int8_t, ndim=2] tri_table = _TRI_TABLE
    cdef cnp.ndarray[cnp.int8_t, ndim=1] tri_counts = _TRI_COUNTS
    cdef cnp.ndarray[cnp.int64_t, ndim=2] edge_offset = _EDGE_GRID_OFFSET

    cdef long i, j, k, c, e, n
    cdef long base, cfg
    cdef long nxny = <long>nx * ny
    cdef long gi, gj, gk, axis, lin1
    cdef double v0, v1, tt

    cdef cnp.ndarray[cnp.int64_t, ndim=1] edge_vertex = np.full(
        3 * <long>nx * ny * nz, -1, dtype=np.int64)
    cdef long n_vertices = 0
    cdef long n_triangles = 0
    cdef bint inside0, inside1

    # vertex ids in ascending global-edge-id order: loops k, j, i, axis
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                base = i + nx * (j + ny * k)
                v0 = data_linear[base]
                inside0 = v0 > iso
                for axis in range(3):
                    if axis == 0:
                        if i == nx - 1:
                            continue
                        lin1 = base + 1
                    elif axis == 1:
                        if j == ny - 1:
                            continue
                        lin1 = base + nx
                    else:
                        if k == nz - 1:
                            continue
                        lin1 = base + nxny
                    inside1 = data_linear[lin1] > iso
                    if inside0 != inside1:
                        edge_vertex[3 * base + axis] = n_vertices
                        n_vertices += 1

    cdef cnp.ndarray[cnp.float64_t, ndim=2] verts = np.empty((n_vertices, 3))
    cdef long vid
    for k in range(nz):
        for j in range(ny):
            for i in range(nx):
                base = i + nx * (j + ny * k)
                for axis in range(3):
                    vid = edge_vertex[3 * base + axis]
                    if vid < 0:
                        continue
                    if axis == 0:
                        lin1 = base + 1
                    elif axis == 1:
                        lin1 = base + nx
                    else:
                        lin1 = base + nxny
                    v0 = data_linear[base]
                    v1 = data_linear[lin1]
                    tt = (iso - v0) / (v1 - v0)
                    verts[vid, 0] = <double>i
                    verts[vid, 1] = <double>j
                    verts[vid, 2] = <double>k
                    verts[vid, axis] += tt

    for k in range(nz - 1):
        for j in range(ny - 1):
            for i in range(nx - 1):
                base = i + nx * (j + ny * k)
                cfg = 0
                if data_linear[base] > iso: cfg |= 1
                if data_linear[base + 1] > iso: cfg |= 2
                if data_linear[base + 1 + nx] > iso: cfg |= 4
                if data_linear[base + nx] > iso: cfg |= 8
                if data_linear[base + nxny] > iso: cfg |= 16
                if data_linear[base + nxny + 1] > iso: cfg |= 32
                if data_linear[base + nxny + 1 + nx] > iso: cfg |= 64
                if data_linear[base + nxny + nx] > iso: cfg |= 128
                n_triangles += tri_counts[cfg]

    cdef cnp.ndarray[cnp.int64_t, ndim=2] tris = np.empty((n_triangles, 3),
                                                          dtype=np.int64)
    cdef long row = 0
    cdef long eidx
    for k in range(nz - 1):
        for j in range(ny - 1):
            for i in range(nx - 1):
                base = i + nx * (j + ny * k)
                cfg = 0
                if data_linear[base] > iso: cfg |= 1
                if data_linear[base + 1] > iso: cfg |= 2
                if data_linear[base + 1 + nx] > iso: cfg |= 4
                if data_linear[base + nx] > iso: cfg |= 8
                if data_linear[base + nxny] > iso: cfg |= 16
                if data_linear[base + nxny + 1] > iso: cfg |= 32
                if data_linear[base + nxny + 1 + nx] > iso: cfg |= 64
                if data_linear[base + nxny + nx] > iso: cfg |= 128
                n = tri_counts[cfg]
                for c in range(3 * n):
                    e = tri_table[cfg, c]
                    gi = i + edge_offset[e, 0]
                    gj = j + edge_offset[e, 1]
                    gk = k + edge_offset[e, 2]
                    axis = edge_offset[e, 3]
                    eidx = 3 * (gi + nx * (gj + ny * gk)) + axis
                    tris[row + c // 3, c % 3] = edge_vertex[eidx]
                row += n
    return verts, tris


def flood_fill(cnp.ndarray[cnp.uint8_t, ndim=1] admissible,
               int nx, int ny, int nz,
               cnp.ndarray[cnp.int64_t, ndim=1] seeds,
               int connectivity):
    """Breadth-first flood fill over admissible voxels from seed indices."""
    cdef long n = <long>nx * ny * nz
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] queue = np.empty(n, dtype=np.int64)
    cdef long head = 0, tail = 0
    cdef long s, cur, nxt, i, j, k, ii, jj, kk, di, dj, dk
    cdef long nxny = <long>nx * ny
    cdef bint full = connectivity == 26

    for s in range(seeds.shape[0]):
        cur = seeds[s]
        if admissible[cur] and not out[cur]:
            out[cur] = 1
            queue[tail] = cur
            tail += 1
    while head < tail:
        cur = queue[head]
        head += 1
        i = cur % nx
        j = (cur // nx) % ny
        k = cur // nxny
        for dk in range(-1, 2):
            kk = k + dk
            if kk < 0 or kk >= nz:
                continue
            for dj in range(-1, 2):
                jj = j + dj
                if jj < 0 or jj >= ny:
                    continue
                for di in range(-1, 2):
                    if di == 0 and dj == 0 and dk == 0:
                        continue
                    if not full and (di != 0) + (dj != 0) + (dk != 0) != 1:
                        continue
                    ii = i + di
                    if ii < 0 or ii >= nx:
                        continue
                    nxt = ii + nx * (jj + ny * kk)
                    if admissible[nxt] and not out[nxt]:
                        out[nxt] = 1
                        queue[tail] = nxt
                        tail += 1
    return out
