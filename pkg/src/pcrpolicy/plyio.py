"""Minimal PLY reader/writer for point clouds (ASCII and binary little-endian)."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import PlyFormatError
from .geometry import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def write_ply(path, cloud: PointCloud, binary: bool = True, double: bool = False) -> None:
    """Write ``cloud`` as a PLY vertex list.

    Coordinates and normals are 32-bit floats unless ``double`` is set; colors are
    stored as 8-bit channels.
    """
    ftype, fdt = ("double", "f8") if double else ("float", "f4")
    props = [("x", ftype, fdt), ("y", ftype, fdt), ("z", ftype, fdt)]
    if cloud.normals is not None:
        props += [("nx", ftype, fdt), ("ny", ftype, fdt), ("nz", ftype, fdt)]
    if cloud.colors is not None:
        props += [("red", "uchar", "u1"), ("green", "uchar", "u1"), ("blue", "uchar", "u1")]

    n = len(cloud)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for name, t, _ in props]
    header.append("end_header")

    data = np.empty(n, dtype=[(name, "<" + dt) for name, _, dt in props])
    for k, name in enumerate("xyz"):
        data[name] = cloud.points[:, k]
    if cloud.normals is not None:
        for k, name in enumerate(("nx", "ny", "nz")):
            data[name] = cloud.normals[:, k]
    if cloud.colors is not None:
        c8 = np.round(cloud.colors * 255.0).astype(np.uint8)
        for k, name in enumerate(("red", "green", "blue")):
            data[name] = c8[:, k]

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(data.tobytes())
        else:
            for row in data:
                f.write((" ".join(_ascii_value(v) for v in row) + "\n").encode("ascii"))


def _ascii_value(v) -> str:
    if isinstance(v, np.floating):
        return repr(float(v))
    return str(int(v))


def read_ply(path) -> PointCloud:
    """Read the vertex element of a PLY file into a :class:`PointCloud`.

    Raises:
        PlyFormatError: on a malformed header, unsupported format or truncated body.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise PlyFormatError(f"{path}: {e.strerror or e}") from e
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyFormatError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    try:
        header_lines = raw[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as e:
        raise PlyFormatError(f"{path}: non-ascii header") from e

    fmt = None
    elements = []  # [name, count, [(prop, dtype)]]
    for line in header_lines[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyFormatError(f"{path}: bad element line {line!r}")
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise PlyFormatError(f"{path}: property before element")
            if tok[1] == "list":
                raise PlyFormatError(f"{path}: list properties are not supported")
            if tok[1] not in _PLY_TYPES:
                raise PlyFormatError(f"{path}: unknown property type {tok[1]!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PlyFormatError(f"{path}: unexpected header line {line!r}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyFormatError(f"{path}: unsupported format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise PlyFormatError(f"{path}: first element must be 'vertex'")

    _, n, props = elements[0]
    names = [p for p, _ in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise PlyFormatError(f"{path}: missing vertex property {req!r}")

    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii").split("\n")
        rows = [ln.split() for ln in lines if ln.strip()][:n]
        if len(rows) < n or any(len(r) < len(props) for r in rows):
            raise PlyFormatError(f"{path}: truncated ascii body")
        try:
            table = np.array([r[: len(props)] for r in rows], dtype=np.float64).reshape(n, len(props))
        except ValueError as e:
            raise PlyFormatError(f"{path}: unparsable ascii body ({e})") from e
        cols = {name: table[:, k] for k, name in enumerate(names)}
    else:
        order = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(p, order + d) for p, d in props])
        if len(raw) - body_start < dt.itemsize * n:
            raise PlyFormatError(f"{path}: truncated binary body")
        data = np.frombuffer(raw, dtype=dt, count=n, offset=body_start)
        cols = {name: data[name].astype(np.float64) for name in names}

    points = np.column_stack([cols["x"], cols["y"], cols["z"]])
    colors = normals = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.column_stack([cols["red"], cols["green"], cols["blue"]]) / 255.0
    if all(c in cols for c in ("nx", "ny", "nz")):
        normals = np.column_stack([cols["nx"], cols["ny"], cols["nz"]])
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        # float32 storage leaves ~1e-7 norm error; degenerate rows drop the attribute
        normals = normals / norm if np.all(norm > 0) else None
    try:
        return PointCloud(points, colors, normals)
    except ValueError as e:
        raise PlyFormatError(f"{path}: {e}") from e


def atomic_write_ply(path, cloud: PointCloud, **kw) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    write_ply(tmp, cloud, **kw)
    os.replace(tmp, path)

