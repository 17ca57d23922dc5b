"""File formats: JSON+raw volumes, binary STL / ASCII PLY meshes, reports.

Volume container: ``<name>.json`` header next to ``<name>.raw`` payload,
little-endian, x-fastest voxel order.  Scalar volumes are int16, masks are
uint8 holding {0, 1}.  All readers validate sizes and values and raise
FormatError instead of crashing on malformed input.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .surface import TriangleMesh
from .volume import BinaryMask, GridGeometry, ScalarVolume


class FormatError(ValueError):
    """Malformed or inconsistent file content."""


_HEADER_KEYS = {"dims", "spacing_mm", "origin_mm", "dtype", "byte_order", "kind"}


def _validate_triplet(value, name, kind=float, positive=False):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise FormatError(f"header field {name!r} must be a list of 3 numbers")
    try:
        out = [kind(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise FormatError(f"header field {name!r} has a non-numeric entry") from exc
    if positive and any(v <= 0 for v in out):
        raise FormatError(f"header field {name!r} entries must be positive")
    return out


def _raw_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def read_volume(header_path) -> ScalarVolume | BinaryMask:
    """Read a volume or mask from its JSON header and sibling raw payload."""
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot parse volume header {header_path}: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"volume header {header_path} must be a JSON object")
    unknown = set(header) - _HEADER_KEYS
    if unknown:
        raise FormatError(f"unknown header fields: {sorted(unknown)}")
    missing = _HEADER_KEYS - set(header)
    if missing:
        raise FormatError(f"missing header fields: {sorted(missing)}")
    dims = _validate_triplet(header["dims"], "dims", kind=int, positive=True)
    spacing = _validate_triplet(header["spacing_mm"], "spacing_mm", positive=True)
    origin = _validate_triplet(header["origin_mm"], "origin_mm")
    if header["byte_order"] != "little":
        raise FormatError(f"unsupported byte_order {header['byte_order']!r}")
    kind = header["kind"]
    dtype_name = header["dtype"]
    if kind not in ("scalar", "mask"):
        raise FormatError(f"kind must be 'scalar' or 'mask', got {kind!r}")
    if dtype_name not in ("int16", "uint8"):
        raise FormatError(f"dtype must be 'int16' or 'uint8', got {dtype_name!r}")
    if kind == "scalar" and dtype_name != "int16":
        raise FormatError("scalar volumes must use dtype int16")
    if kind == "mask" and dtype_name != "uint8":
        raise FormatError("masks must use dtype uint8")
    dtype = np.dtype("<i2") if dtype_name == "int16" else np.dtype("u1")

    raw_path = _raw_path(header_path)
    if not raw_path.exists():
        raise FormatError(f"missing raw payload {raw_path}")
    payload = raw_path.read_bytes()
    n_voxels = dims[0] * dims[1] * dims[2]
    expected = n_voxels * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"payload size mismatch in {raw_path}: expected {expected} bytes "
            f"({n_voxels} voxels x {dtype.itemsize}), found {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    geometry = GridGeometry(tuple(dims), tuple(spacing), tuple(origin))
    grid = flat.reshape(dims, order="F")
    if kind == "scalar":
        return ScalarVolume(geometry, np.asfortranarray(grid))
    bad = np.setdiff1d(np.unique(flat), [0, 1])
    if bad.size:
        raise FormatError(f"mask payload contains values outside {{0, 1}}: {bad.tolist()}")
    return BinaryMask(geometry, grid.astype(bool))


def write_volume(volume: ScalarVolume | BinaryMask, header_path) -> None:
    """Inverse of read_volume: write ``<name>.json`` and ``<name>.raw``."""
    header_path = Path(header_path)
    if isinstance(volume, ScalarVolume):
        kind, dtype_name = "scalar", "int16"
        flat = volume.linear_data().astype("<i2")
    elif isinstance(volume, BinaryMask):
        kind, dtype_name = "mask", "uint8"
        flat = volume.linear_bits().astype("u1")
    else:
        raise TypeError(f"expected ScalarVolume or BinaryMask, got {type(volume)}")
    header = {
        "dims": list(volume.geometry.dims),
        "spacing_mm": list(volume.geometry.spacing),
        "origin_mm": list(volume.geometry.origin),
        "dtype": dtype_name,
        "byte_order": "little",
        "kind": kind,
    }
    header_path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    _raw_path(header_path).write_bytes(flat.tobytes())


# ---------------------------------------------------------------------------
# Meshes: binary STL and ASCII PLY
# ---------------------------------------------------------------------------

STL_HEADER_BYTES = 80
STL_RECORD_BYTES = 50


def read_mesh(path) -> TriangleMesh:
    """Read a binary STL or ASCII PLY mesh, dispatching on the extension.

    STL soup is welded into an indexed mesh by exact bitwise vertex
    equality (exporters repeat shared vertices verbatim, so no epsilon
    merging is needed).
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".stl":
        return _read_stl(path)
    if suffix == ".ply":
        return _read_ply(path)
    raise FormatError(f"unsupported mesh extension {suffix!r} (use .stl or .ply)")


def write_mesh(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".stl":
        _write_stl(mesh, path)
    elif suffix == ".ply":
        _write_ply(mesh, path)
    else:
        raise FormatError(f"unsupported mesh extension {suffix!r} (use .stl or .ply)")


def _read_stl(path: Path) -> TriangleMesh:
    blob = path.read_bytes()
    if len(blob) < STL_HEADER_BYTES + 4:
        raise FormatError(f"{path} is too short to be a binary STL ({len(blob)} bytes)")
    (count,) = struct.unpack_from("<I", blob, STL_HEADER_BYTES)
    if count == 0:
        raise FormatError(f"{path} declares zero triangles")
    expected = STL_HEADER_BYTES + 4 + count * STL_RECORD_BYTES
    if len(blob) != expected:
        raise FormatError(
            f"{path} declares {count} triangles ({expected} bytes) but has {len(blob)} bytes"
        )
    records = np.frombuffer(blob, dtype=np.uint8, offset=STL_HEADER_BYTES + 4)
    records = records.reshape(count, STL_RECORD_BYTES)
    floats = records[:, :48].copy().view("<f4").reshape(count, 4, 3)
    corners = floats[:, 1:, :]  # skip the per-facet normal
    flat = corners.reshape(-1, 3)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    return TriangleMesh(uniq.astype(np.float64), inverse.reshape(-1, 3))


def _write_stl(mesh: TriangleMesh, path: Path) -> None:
    if mesh.n_triangles == 0:
        raise FormatError("refusing to write an empty STL mesh")
    v = mesh.vertices[mesh.triangles].astype("<f4")
    cross = np.cross(
        v[:, 1].astype(np.float64) - v[:, 0], v[:, 2].astype(np.float64) - v[:, 0]
    )
    norms = np.linalg.norm(cross, axis=1, keepdims=True)
    normals = np.divide(cross, norms, out=np.zeros_like(cross), where=norms > 0)
    records = np.zeros((mesh.n_triangles, STL_RECORD_BYTES), dtype=np.uint8)
    packed = np.ascontiguousarray(
        np.concatenate([normals.astype("<f4")[:, None, :], v], axis=1)
    )
    records[:, :48] = packed.reshape(mesh.n_triangles, 12).view(np.uint8)
    header = b"voxrec binary STL".ljust(STL_HEADER_BYTES, b"\0")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<I", mesh.n_triangles))
        fh.write(records.tobytes())


def _read_ply(path: Path) -> TriangleMesh:
    try:
        text = path.read_text(encoding="ascii")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read PLY {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path} is missing the 'ply' magic line")
    n_vertex = n_face = None
    vertex_props: list[str] = []
    in_vertex_element = False
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise FormatError(f"{path}: only ASCII PLY is supported")
        elif tokens[0] == "element":
            in_vertex_element = tokens[1] == "vertex"
            if tokens[1] == "vertex":
                n_vertex = int(tokens[2])
            elif tokens[1] == "face":
                n_face = int(tokens[2])
        elif tokens[0] == "property" and in_vertex_element and tokens[1] != "list":
            vertex_props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None or n_vertex is None or n_face is None:
        raise FormatError(f"{path}: incomplete PLY header")
    for axis in ("x", "y", "z"):
        if axis not in vertex_props:
            raise FormatError(f"{path}: vertex element lacks property {axis!r}")
    cols = [vertex_props.index(a) for a in ("x", "y", "z")]
    body = [ln.split() for ln in lines[body_start:] if ln.strip()]
    if len(body) < n_vertex + n_face:
        raise FormatError(
            f"{path}: expected {n_vertex} vertex and {n_face} face lines, "
            f"found {len(body)}"
        )
    try:
        verts = np.array(
            [[float(row[c]) for c in cols] for row in body[:n_vertex]], dtype=np.float64
        )
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed vertex line: {exc}") from exc
    tris = []
    for row in body[n_vertex : n_vertex + n_face]:
        try:
            n = int(row[0])
            idx = [int(t) for t in row[1 : 1 + n]]
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: malformed face line: {exc}") from exc
        if len(idx) != n or n < 3:
            raise FormatError(f"{path}: face line declares {n} indices, found {len(idx)}")
        for k in range(1, n - 1):  # fan-triangulate polygons
            tris.append((idx[0], idx[k], idx[k + 1]))
    if not tris:
        raise FormatError(f"{path} contains no faces")
    if len(verts) == 0:
        raise FormatError(f"{path} contains no vertices")
    return TriangleMesh(verts, np.asarray(tris, dtype=np.int64))


def _write_ply(mesh: TriangleMesh, path: Path) -> None:
    if mesh.n_triangles == 0:
        raise FormatError("refusing to write an empty PLY mesh")
    out = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.n_vertices}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {mesh.n_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    out += [f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}" for v in mesh.vertices]
    out += [f"3 {t[0]} {t[1]} {t[2]}" for t in mesh.triangles]
    path.write_text("\n".join(out) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

# Fixed CSV column order; every writer and consumer relies on it.
REPORT_CSV_COLUMNS = [
    "geometry",
    "segmenter",
    "foreground_fraction",
    "sensitivity",
    "specificity",
    "precision",
    "dice",
    "jaccard",
    "volume_similarity",
    "chamfer_sq_mm2",
    "chamfer_mm",
    "ahd_mm",
    "rmse_mm",
    "ransac_fitness",
    "ransac_inlier_rmse",
    "ransac_iterations",
    "icp_fitness",
    "icp_inlier_rmse",
    "icp_iterations",
    "icp_converged",
]


def _csv_quote(value) -> str:
    if value is None:
        return ""
    text = str(value)
    if any(ch in text for ch in ',"\r\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text


def write_report(reports, path, format: str = "json") -> None:
    """Serialize pipeline reports: one object/row per (geometry, segmenter).

    ``reports`` is a single MetricsReport or a list of them.  JSON keeps the
    full record (config echo, timings); CSV flattens to the documented
    REPORT_CSV_COLUMNS order with empty cells for undefined metrics.
    """
    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    path = Path(path)
    if format == "json":
        payload = json.dumps([r.to_json_obj() for r in reports], indent=2, sort_keys=True)
        path.write_text(payload + "\n", encoding="utf-8")
    elif format == "csv":
        lines = [",".join(REPORT_CSV_COLUMNS)]
        for r in reports:
            row = r.to_csv_row()
            lines.append(",".join(_csv_quote(row[c]) for c in REPORT_CSV_COLUMNS))
        path.write_text("\r\n".join(lines) + "\r\n", encoding="utf-8")
    else:
        raise ValueError(f"format must be 'json' or 'csv', got {format!r}")
