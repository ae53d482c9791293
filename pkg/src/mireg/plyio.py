"""Minimal PLY reader/writer for vertex-only clouds (ASCII and binary little-endian).

Recognised vertex properties: ``x y z``, ``nx ny nz``, ``curvature`` and ``label``.
Other vertex properties are read and ignored.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geom import PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    fields = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    columns = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2]]
    if cloud.normals is not None:
        fields += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
        columns += [cloud.normals[:, 0], cloud.normals[:, 1], cloud.normals[:, 2]]
    if cloud.curvature is not None:
        fields.append(("curvature", "f8"))
        columns.append(cloud.curvature)
    if cloud.labels is not None:
        fields.append(("label", "i4"))
        columns.append(cloud.labels)

    names = {"f8": "double", "i4": "int"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {names[t]} {n}" for n, t in fields]
    header.append("end_header")
    data = np.empty(len(cloud), dtype=[(n, "<" + t) for n, t in fields])
    for (n, _), col in zip(fields, columns):
        data[n] = col

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(v.item()) for v in row) + "\n").encode("ascii"))


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()

    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if tok[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    if not elements or elements[0][0] != "vertex":
        raise ValueError(f"{path}: vertex element must come first")

    _, count, props = elements[0]
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    if fmt == "ascii":
        text = raw[body_start:].decode("ascii").split()
        flat = np.array(text[: count * len(props)], dtype=np.float64).reshape(count, len(props))
        data = np.empty(count, dtype=dtype)
        for i, (n, _) in enumerate(props):
            data[n] = flat[:, i]
    else:
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)

    names = set(dtype.names)
    points = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
    normals = None
    if {"nx", "ny", "nz"} <= names:
        normals = np.stack([data["nx"], data["ny"], data["nz"]], axis=1).astype(np.float64)
    curvature = data["curvature"].astype(np.float64) if "curvature" in names else None
    labels = data["label"].astype(np.int64) if "label" in names else None
    return PointCloud(points, normals, curvature, labels)
