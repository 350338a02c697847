"""ASCII PLY and plain-text XYZ point-cloud files.

PLY vertices carry ``x y z`` and optionally ``nx ny nz``. The text format is
one point per line with three or six whitespace-separated numbers; ``#``
starts a comment. Floats are written with ``repr`` so round trips are exact.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from directreg.core3d import PointCloud
from directreg.errors import ParseError, UnsupportedFormat

PLY_SUFFIXES = (".ply",)
TEXT_SUFFIXES = (".xyz", ".xyzn", ".txt", ".pts")
_POS = ("x", "y", "z")
_NRM = ("nx", "ny", "nz")


def _fmt(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def save_point_cloud(cloud: PointCloud, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    if suffix in PLY_SUFFIXES:
        props = _POS + (_NRM if cloud.normals is not None else ())
        header = ["ply", "format ascii 1.0", f"element vertex {len(data)}"]
        header += [f"property double {p}" for p in props]
        header.append("end_header")
        lines = header + [_fmt(r) for r in data]
    elif suffix in TEXT_SUFFIXES:
        lines = [_fmt(r) for r in data]
    else:
        raise UnsupportedFormat(f"unsupported point-cloud extension {path.suffix!r}")
    path.write_text("\n".join(lines) + "\n")


def load_point_cloud(path) -> PointCloud:
    path = Path(path)
    suffix = path.suffix.lower()
    lines = path.read_text().splitlines()
    if suffix in PLY_SUFFIXES:
        return _parse_ply(lines)
    if suffix in TEXT_SUFFIXES:
        return _parse_text(lines)
    raise UnsupportedFormat(f"unsupported point-cloud extension {path.suffix!r}")


def _floats(tokens, lineno: int) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric value in {' '.join(tokens)!r}", line=lineno) from None


def _build(rows: np.ndarray, has_normals: bool, first_line: int) -> PointCloud:
    pts = rows[:, :3] if len(rows) else np.zeros((0, 3))
    normals = None
    if has_normals:
        normals = rows[:, 3:6] if len(rows) else np.zeros((0, 3))
    try:
        return PointCloud(pts, normals)
    except ValueError as exc:
        raise ParseError(str(exc), line=first_line) from None


def _parse_text(lines: list[str]) -> PointCloud:
    rows, width, first = [], None, 1
    for no, raw in enumerate(lines, start=1):
        body = raw.split("#", 1)[0].split()
        if not body:
            continue
        if len(body) not in (3, 6):
            raise ParseError(f"expected 3 or 6 values, got {len(body)}", line=no)
        if width is None:
            width, first = len(body), no
        elif len(body) != width:
            raise ParseError(f"expected {width} values, got {len(body)}", line=no)
        rows.append(_floats(body, no))
    arr = np.array(rows, dtype=np.float64).reshape(-1, width or 3)
    return _build(arr, width == 6, first)


def _parse_ply(lines: list[str]) -> PointCloud:
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1)
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    end = None
    for no, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        key = tok[0]
        if key == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise UnsupportedFormat(f"only ASCII PLY is supported (line {no})")
        elif key == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", line=no)
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise ParseError(f"bad vertex count {tok[2]!r}", line=no) from None
                if n_vertex < 0:
                    raise ParseError("negative vertex count", line=no)
            elif n_vertex is None:
                raise UnsupportedFormat(f"elements before 'vertex' are not supported (line {no})")
        elif key == "property":
            if len(tok) != 3:
                raise ParseError("malformed property line", line=no)
            if in_vertex:
                props.append(tok[2])
        elif key == "end_header":
            end = no
            break
        else:
            raise ParseError(f"unknown header keyword {key!r}", line=no)
    if end is None:
        raise ParseError("missing end_header", line=len(lines))
    if n_vertex is None:
        raise ParseError("no vertex element", line=end)
    missing = [p for p in _POS if p not in props]
    if missing:
        raise ParseError(f"vertex lacks properties {missing}", line=end)
    has_normals = all(p in props for p in _NRM)
    cols = [props.index(p) for p in _POS + (_NRM if has_normals else ())]

    rows = []
    no = end
    for no in range(end + 1, end + 1 + n_vertex):
        if no > len(lines):
            raise ParseError(f"expected {n_vertex} vertices, file ends early", line=no)
        tok = lines[no - 1].split()
        if len(tok) < len(props):
            raise ParseError(f"expected {len(props)} values, got {len(tok)}", line=no)
        vals = _floats(tok[:len(props)], no)
        rows.append([vals[c] for c in cols])
    arr = np.array(rows, dtype=np.float64).reshape(-1, len(cols))
    return _build(arr, has_normals, end + 1)
