"""Reading and writing clouds, feature matrices, metrics and layer parameters.

Clouds are ASCII XYZ (``x y z [label]`` per line, ``#`` comments) or ASCII
PLY with one ``vertex`` element. All text output uses LF line endings and a
``.`` decimal separator independent of locale. Coordinates are written with
17 significant digits so they read back bit-exactly.
"""

import math
import os
import warnings

import numpy as np

from .errors import EmptyCloud, IoError, ParseError, ShapeMismatch, UnsupportedPly
from .kernels import GibKind
from .neighborhood import PointCloud

MAX_LABEL = 2**16 - 1
XYZ_EXTENSIONS = (".xyz", ".txt", ".pts", ".asc")

_PLY_SCALARS = {
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double",
    "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64",
}
_PLY_INTEGERS = {"char", "uchar", "short", "ushort", "int", "uint",
                 "int8", "uint8", "int16", "uint16", "int32", "uint32"}


def _fmt17(v):
    return format(float(v), ".17g")


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(exc.errno, f"cannot read {path}: {exc.strerror}") from exc


def _decode(data):
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(data[: exc.start].count(b"\n") + 1, "invalid UTF-8") from None


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def _parse_float(token, lineno, what):
    try:
        v = float(token)
    except ValueError:
        raise ParseError(lineno, f"{what} {token!r} is not a number") from None
    if not math.isfinite(v):
        raise ParseError(lineno, f"{what} {token!r} is not finite")
    return v


def _parse_label(token, lineno):
    try:
        v = int(token)
    except ValueError:
        # accept integral floats such as "3.0" written by other tools
        try:
            f = float(token)
        except ValueError:
            f = math.nan
        if not (math.isfinite(f) and f == int(f)):
            raise ParseError(lineno, f"label {token!r} is not an integer") from None
        v = int(f)
    if v < 0 or v > MAX_LABEL:
        raise ParseError(lineno, f"label {v} outside [0, {MAX_LABEL}]")
    return v


# --------------------------------------------------------------------------
# XYZ
# --------------------------------------------------------------------------


def parse_xyz(text):
    coords, labels = [], []
    width = None
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) not in (3, 4):
            raise ParseError(lineno, "expected 3 or 4 fields")
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(lineno, f"expected {width} fields like the first point, got {len(fields)}")
        coords.append([_parse_float(f, lineno, "coordinate") for f in fields[:3]])
        if width == 4:
            labels.append(_parse_label(fields[3], lineno))
    if not coords:
        raise EmptyCloud("no points found")
    return PointCloud(np.array(coords), labels=np.array(labels) if width == 4 else None)


def format_xyz(cloud):
    lines = []
    if cloud.labels is None:
        for x, y, z in cloud.coords:
            lines.append(f"{_fmt17(x)} {_fmt17(y)} {_fmt17(z)}")
    else:
        for (x, y, z), lab in zip(cloud.coords, cloud.labels):
            lines.append(f"{_fmt17(x)} {_fmt17(y)} {_fmt17(z)} {int(lab)}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# PLY (ASCII subset)
# --------------------------------------------------------------------------


def _parse_ply_header(lines):
    if not lines or lines[0].strip() != "ply":
        raise ParseError(1, "missing 'ply' magic line")
    elements = []
    fmt_seen = False
    for i in range(1, len(lines)):
        lineno = i + 1
        parts = lines[i].split()
        if not parts:
            continue
        key = parts[0]
        if key == "format":
            if len(parts) != 3:
                raise ParseError(lineno, "malformed format line")
            if parts[1] != "ascii":
                raise UnsupportedPly(f"{parts[1]} encoding")
            if parts[2] != "1.0":
                raise UnsupportedPly(f"PLY version {parts[2]}")
            fmt_seen = True
        elif key in ("comment", "obj_info"):
            continue
        elif key == "element":
            if len(parts) != 3:
                raise ParseError(lineno, "malformed element line")
            try:
                count = int(parts[2])
            except ValueError:
                raise ParseError(lineno, f"element count {parts[2]!r} is not an integer") from None
            if count < 0:
                raise ParseError(lineno, "negative element count")
            elements.append({"name": parts[1], "count": count, "props": [], "line": lineno})
        elif key == "property":
            if not elements:
                raise ParseError(lineno, "property before any element")
            if len(parts) == 3 and parts[1] in _PLY_SCALARS:
                elements[-1]["props"].append((parts[2], parts[1], False))
            elif len(parts) == 5 and parts[1] == "list" and parts[2] in _PLY_INTEGERS \
                    and parts[3] in _PLY_SCALARS:
                elements[-1]["props"].append((parts[4], parts[3], True))
            else:
                raise ParseError(lineno, "malformed property line")
        elif key == "end_header":
            if not fmt_seen:
                raise ParseError(lineno, "missing format line")
            return elements, i + 1
        else:
            raise ParseError(lineno, f"unknown header keyword {key!r}")
    raise ParseError(len(lines), "missing end_header")


def _split_record(tokens, props, lineno):
    """Map one element line to ``{name: [values]}``, honouring list properties."""
    out = {}
    pos = 0
    for name, _, is_list in props:
        if is_list:
            if pos >= len(tokens):
                raise ParseError(lineno, f"missing list length for {name!r}")
            try:
                n = int(tokens[pos])
            except ValueError:
                raise ParseError(lineno, f"list length {tokens[pos]!r} is not an integer") from None
            if n < 0:
                raise ParseError(lineno, "negative list length")
            out[name] = tokens[pos + 1:pos + 1 + n]
            pos += 1 + n
        else:
            out[name] = tokens[pos:pos + 1]
            pos += 1
    if pos != len(tokens):
        raise ParseError(lineno, f"expected {pos} values, got {len(tokens)}")
    return out


def parse_ply(text):
    lines = text.split("\n")
    elements, body = _parse_ply_header(lines)
    vertex = [e for e in elements if e["name"] == "vertex"]
    if not vertex:
        raise UnsupportedPly("file without a vertex element")
    if len(vertex) > 1:
        raise UnsupportedPly("more than one vertex element")
    vdecl = vertex[0]
    names = [p[0] for p in vdecl["props"]]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(vdecl["line"], f"vertex element lacks property {axis!r}")
    by_name = {p[0]: p for p in vdecl["props"]}
    for axis in ("x", "y", "z", "label"):
        if axis in by_name and by_name[axis][2]:
            raise UnsupportedPly(f"list-valued property {axis!r}")
    feature_names = sorted((n for n in names if n[:1] == "f" and n[1:].isdigit()
                            and not by_name[n][2]), key=lambda n: int(n[1:]))
    if feature_names != [f"f{k}" for k in range(len(feature_names))]:
        feature_names = []
    known = {"x", "y", "z", "label", *feature_names}
    for n in names:
        if n not in known:
            warnings.warn(f"skipping unsupported vertex property {n!r}", stacklevel=2)
    for e in elements:
        if e is not vdecl:
            warnings.warn(f"skipping PLY element {e['name']!r} ({e['count']} records)", stacklevel=2)

    has_label = "label" in by_name
    coords = np.empty((vdecl["count"], 3))
    labels = np.empty(vdecl["count"], dtype=np.int64) if has_label else None
    feats = np.empty((vdecl["count"], len(feature_names))) if feature_names else None

    i = body
    for e in elements:
        for r in range(e["count"]):
            while i < len(lines) and not lines[i].strip():
                i += 1
            if i >= len(lines):
                raise ParseError(len(lines), f"expected {e['count']} {e['name']} records, "
                                              f"found {r}")
            lineno = i + 1
            rec = _split_record(lines[i].split(), e["props"], lineno)
            i += 1
            if e is not vdecl:
                continue
            for c, axis in enumerate("xyz"):
                coords[r, c] = _parse_float(rec[axis][0], lineno, "coordinate")
            if has_label:
                labels[r] = _parse_label(rec["label"][0], lineno)
            for c, fname in enumerate(feature_names):
                feats[r, c] = _parse_float(rec[fname][0], lineno, "feature")
    for j in range(i, len(lines)):
        if lines[j].strip():
            raise ParseError(j + 1, "unexpected data after the last declared element")
    if vdecl["count"] == 0:
        raise EmptyCloud("PLY declares zero vertices")
    return PointCloud(coords, feats, labels)


def format_ply(cloud):
    head = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
            "property double x", "property double y", "property double z"]
    C = cloud.num_features
    head += [f"property double f{k}" for k in range(C)]
    if cloud.labels is not None:
        head.append("property ushort label")
    head.append("end_header")
    rows = []
    feats = cloud.feature_matrix()
    for n in range(len(cloud)):
        vals = [_fmt17(v) for v in cloud.coords[n]] + [_fmt17(v) for v in feats[n]]
        if cloud.labels is not None:
            vals.append(str(int(cloud.labels[n])))
        rows.append(" ".join(vals))
    return "\n".join(head + rows) + "\n"


# --------------------------------------------------------------------------
# public cloud API
# --------------------------------------------------------------------------


def _resolve_format(path, fmt, data=None):
    if fmt not in ("auto", "xyz", "ply"):
        raise ValueError(f"format must be auto, xyz or ply, got {fmt!r}")
    if fmt != "auto":
        return fmt
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return "ply"
    if ext in XYZ_EXTENSIONS:
        return "xyz"
    if data is not None and data.lstrip()[:3] == b"ply":
        return "ply"
    return "xyz"


def read_cloud(path, format="auto"):
    """Read an XYZ or ASCII PLY file.

    Raises
    ------
    ParseError
        Malformed content, with the 1-based line number.
    EmptyCloud
        The file holds no points.
    UnsupportedPly
        Binary encodings or layouts outside the supported subset.
    """
    data = _read_bytes(path)
    fmt = _resolve_format(path, format, data)
    text = _decode(data)
    if text.startswith("﻿"):
        text = text[1:]
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return parse_ply(text) if fmt == "ply" else parse_xyz(text)


def write_cloud(cloud, path, format="auto"):
    """Write ``cloud`` deterministically. XYZ holds coordinates and labels only."""
    fmt = _resolve_format(path, format)
    _write_text(path, format_ply(cloud) if fmt == "ply" else format_xyz(cloud))


# --------------------------------------------------------------------------
# feature and metric CSVs
# --------------------------------------------------------------------------


def format_features(matrix):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeMismatch(f"feature matrix must be 2-D, got shape {matrix.shape}")
    lines = [",".join(f"f{k}" for k in range(matrix.shape[1]))]
    for row in matrix:
        lines.append(",".join(format(float(v), ".9g") for v in row))
    return "\n".join(lines) + "\n"


def write_features(matrix, path, num_points=None):
    """CSV with a ``f0,f1,...`` header and one 9-significant-digit row per point."""
    matrix = np.asarray(matrix)
    if num_points is not None and (matrix.ndim != 2 or matrix.shape[0] != num_points):
        raise ShapeMismatch(f"expected {num_points} rows, got shape {matrix.shape}")
    _write_text(path, format_features(matrix))


def read_features(path):
    text = _decode(_read_bytes(path))
    lines = [ln for ln in text.split("\n")]
    if not lines or not lines[0].strip():
        raise ParseError(1, "missing header")
    width = len(lines[0].split(","))
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        vals = line.split(",")
        if len(vals) != width:
            raise ParseError(lineno, f"expected {width} values, got {len(vals)}")
        rows.append([_parse_float(v, lineno, "value") for v in vals])
    return np.array(rows).reshape(len(rows), width)


def format_metrics(report):
    K = len(report.classes)
    head = ["model", "epoch", "loss", "accuracy", "miou"] + [f"iou_{c}" for c in report.classes]
    lines = [",".join(head)]
    for rec in report.epochs:
        vals = [rec.model, str(rec.epoch), format(rec.loss, ".9g"),
                format(rec.accuracy, ".9g"), format(rec.miou, ".9g")]
        vals += [format(float(rec.iou[k]), ".9g") for k in range(K)]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def write_metrics(report, path):
    _write_text(path, format_metrics(report))


# --------------------------------------------------------------------------
# layer parameters
# --------------------------------------------------------------------------


def format_layer_params(layer):
    """Plain-text dump: a ``kinds`` block of names then one block per array."""
    out = ["# gibly layer parameters", f"kinds {len(layer.kinds)}"]
    out += [GibKind(int(k)).label for k in layer.kinds]
    for name, arr in layer.parameters().items():
        out.append(f"{name} " + " ".join(str(s) for s in arr.shape))
        out += [" ".join(_fmt17(v) for v in row) for row in np.atleast_2d(arr)]
    return "\n".join(out) + "\n"


def write_layer_params(layer, path):
    _write_text(path, format_layer_params(layer))


def parse_layer_params(text):
    lines = text.split("\n")
    out = {}
    i = 0

    def next_line():
        nonlocal i
        while i < len(lines) and (not lines[i].strip() or lines[i].startswith("#")):
            i += 1
        if i >= len(lines):
            return None, None
        i += 1
        return i, lines[i - 1].split()

    while True:
        lineno, parts = next_line()
        if parts is None:
            break
        name = parts[0]
        try:
            shape = tuple(int(s) for s in parts[1:])
        except ValueError:
            raise ParseError(lineno, f"bad block header {' '.join(parts)!r}") from None
        if name == "kinds":
            kinds = []
            for _ in range(shape[0]):
                ln, p = next_line()
                if p is None:
                    raise ParseError(len(lines), "truncated kinds block")
                try:
                    kinds.append(int(GibKind.parse(p[0])))
                except ValueError as exc:
                    raise ParseError(ln, str(exc)) from None
            out["kinds"] = np.array(kinds, dtype=np.int64)
            continue
        rows = shape[0] if len(shape) == 2 else 1
        width = shape[-1]
        vals = []
        for _ in range(rows):
            ln, p = next_line()
            if p is None:
                raise ParseError(len(lines), f"truncated block {name!r}")
            if len(p) != width:
                raise ParseError(ln, f"expected {width} values, got {len(p)}")
            vals.append([_parse_float(v, ln, "value") for v in p])
        out[name] = np.array(vals).reshape(shape)
    return out


def read_layer_params(path):
    return parse_layer_params(_decode(_read_bytes(path)))
