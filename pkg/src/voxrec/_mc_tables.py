"""Marching-cubes case tables.

The 256-case triangle table is generated once at import by walking the
isocontour chords around each cube configuration instead of hard-coding the
classic listing.  Chords on a cube face depend only on that face's four
corner states (ambiguous faces always separate the inside corners), so two
cells sharing a face always agree on its chords and the extracted surface is
crack-free on any input.  Non-ambiguous configurations reproduce the
standard single-table topology.

Conventions (corner and edge numbering follow the usual marching-cubes
layout):

    corners: 0:(0,0,0) 1:(1,0,0) 2:(1,1,0) 3:(0,1,0)
             4:(0,0,1) 5:(1,0,1) 6:(1,1,1) 7:(0,1,1)
    edges:   0:0-1  1:1-2  2:2-3  3:3-0   4:4-5  5:5-6  6:6-7  7:7-4
             8:0-4  9:1-5 10:2-6 11:3-7

Triangles are emitted with outward orientation: normals point from the
inside (> iso) region toward the outside.
"""

import numpy as np

CORNER_POS = np.array(
    [
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ],
    dtype=np.int64,
)

EDGE_CORNERS = np.array(
    [
        (0, 1), (1, 2), (2, 3), (3, 0),
        (4, 5), (5, 6), (6, 7), (7, 4),
        (0, 4), (1, 5), (2, 6), (3, 7),
    ],
    dtype=np.int64,
)

# Per cube edge: (di, dj, dk, axis) of the grid edge it lies on, relative to
# the cell's base voxel.  Used to weld vertices between neighboring cells.
EDGE_GRID_OFFSET = np.array(
    [
        (0, 0, 0, 0), (1, 0, 0, 1), (0, 1, 0, 0), (0, 0, 0, 1),
        (0, 0, 1, 0), (1, 0, 1, 1), (0, 1, 1, 0), (0, 0, 1, 1),
        (0, 0, 0, 2), (1, 0, 0, 2), (1, 1, 0, 2), (0, 1, 0, 2),
    ],
    dtype=np.int64,
)

# Face corner cycles, counterclockwise as seen from outside the cube.
_FACES = (
    (0, 4, 7, 3),   # x = 0
    (1, 2, 6, 5),   # x = 1
    (0, 1, 5, 4),   # y = 0
    (2, 3, 7, 6),   # y = 1
    (0, 3, 2, 1),   # z = 0
    (4, 5, 6, 7),   # z = 1
)

_EDGE_OF_PAIR = {}
for _e, (_a, _b) in enumerate(EDGE_CORNERS):
    _EDGE_OF_PAIR[(int(_a), int(_b))] = _e
    _EDGE_OF_PAIR[(int(_b), int(_a))] = _e


def _config_triangles(config: int) -> list[tuple[int, int, int]]:
    inside = [(config >> c) & 1 for c in range(8)]
    successor = {}
    for face in _FACES:
        flags = [inside[c] for c in face]
        if sum(flags) in (0, 4):
            continue
        for p in range(4):
            if flags[p] and not flags[p - 1]:
                entry = _EDGE_OF_PAIR[(face[p - 1], face[p])]
                q = p
                while flags[(q + 1) % 4]:
                    q += 1
                exit_ = _EDGE_OF_PAIR[(face[q % 4], face[(q + 1) % 4])]
                successor[entry] = exit_
    triangles = []
    seen = set()
    for start in sorted(successor):
        if start in seen:
            continue
        cycle = [start]
        seen.add(start)
        nxt = successor[start]
        while nxt != start:
            cycle.append(nxt)
            seen.add(nxt)
            nxt = successor[nxt]
        for i in range(1, len(cycle) - 1):
            triangles.append((cycle[0], cycle[i], cycle[i + 1]))
    return triangles


def _build_tables():
    tri_table = np.full((256, 16), -1, dtype=np.int8)
    tri_counts = np.zeros(256, dtype=np.int8)
    for config in range(256):
        tris = _config_triangles(config)
        tri_counts[config] = len(tris)
        flat = [e for tri in tris for e in tri]
        tri_table[config, : len(flat)] = flat
    return tri_table, tri_counts


TRI_TABLE, TRI_COUNTS = _build_tables()
