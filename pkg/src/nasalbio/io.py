"""Readers for point clouds and writers/readers for every artefact the pipeline emits.

Scanner-grid text format: the first non-comment line holds ``rows cols``;
it is followed by ``rows * cols`` records ``x y z flag`` in row-major order.
Flag 0 marks an invalid sample (its coordinates are kept but ignored).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptors import FeatureVector
from .geometry import DepthGrid, EmptyInputError, GeometryError, PointCloud
from .landmarks import LANDMARK_NAMES, LandmarkSet

FORMATS = ("xyz", "ply", "scanner_grid")


class ParseError(GeometryError):
    """Malformed input; ``line`` (1-based) or ``offset`` (bytes) locates it."""

    def __init__(self, message: str, path=None, line: int | None = None, offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte {offset}")
        super().__init__(f"{': '.join([', '.join(where), message]) if where else message}")
        self.path, self.line, self.offset = path, line, offset


def _data_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def _floats(line: str, count: int, path, lineno: int) -> list[float]:
    parts = line.replace(",", " ").split()
    if len(parts) != count:
        raise ParseError(f"expected {count} values, found {len(parts)}", path, line=lineno)
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(f"not a number ({exc})", path, line=lineno) from None


def _finish(points, valid, path) -> PointCloud:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n_valid = len(pts) if valid is None else int(np.count_nonzero(valid))
    if n_valid == 0:
        raise EmptyInputError(f"{path}: no valid points")
    return PointCloud(pts, valid)


def read_xyz(path) -> PointCloud:
    rows = []
    for n, line in _data_lines(Path(path).read_text()):
        vals = _floats(line, 3, path, n)
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite coordinate", path, line=n)
        rows.append(vals)
    return _finish(rows, None, path)


def read_scanner_grid(path) -> PointCloud:
    text = Path(path).read_text()
    lines = list(_data_lines(text))
    if not lines:
        raise EmptyInputError(f"{path}: empty file")
    n0, header = lines[0]
    parts = header.split()
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise ParseError("header must be 'rows cols'", path, line=n0)
    rows, cols = int(parts[0]), int(parts[1])
    records = lines[1:]
    if len(records) != rows * cols:
        where = records[-1][0] + 1 if records else n0 + 1
        raise ParseError(f"expected {rows * cols} records, found {len(records)}", path, line=where)
    data = np.empty((len(records), 4))
    for k, (n, line) in enumerate(records):
        data[k] = _floats(line, 4, path, n)
        if data[k, 3] not in (0.0, 1.0):
            raise ParseError(f"flag must be 0 or 1, got {line.split()[-1]}", path, line=n)
    valid = data[:, 3] == 1.0
    bad = valid & ~np.isfinite(data[:, :3]).all(axis=1)
    if bad.any():
        raise ParseError("non-finite coordinate in a valid record", path, line=records[int(np.argmax(bad))][0])
    return _finish(data[:, :3], valid, path)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyElement:
    name: str
    count: int
    props: list        # (name, dtype) or (name, ("list", count_dtype, item_dtype))


def _parse_ply_header(raw: bytes, path):
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file (missing 'ply' magic or 'end_header')", path, offset=0)
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    fmt, elements = None, []
    offset = 0
    for lineno, line in enumerate(raw[:end].decode("ascii", "replace").splitlines(), 1):
        words = line.split()
        if not words or words[0] in ("ply", "comment", "obj_info"):
            pass
        elif words[0] == "format":
            if len(words) < 2 or words[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise ParseError(f"unsupported PLY format {line!r}", path, line=lineno, offset=offset)
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise ParseError(f"bad element line {line!r}", path, line=lineno, offset=offset)
            elements.append(_PlyElement(words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise ParseError("property before any element", path, line=lineno, offset=offset)
            if len(words) == 5 and words[1] == "list":
                if words[2] not in _PLY_TYPES or words[3] not in _PLY_TYPES:
                    raise ParseError(f"unknown PLY type in {line!r}", path, line=lineno, offset=offset)
                elements[-1].props.append((words[4], ("list", _PLY_TYPES[words[2]], _PLY_TYPES[words[3]])))
            elif len(words) == 3 and words[1] in _PLY_TYPES:
                elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
            else:
                raise ParseError(f"bad property line {line!r}", path, line=lineno, offset=offset)
        else:
            raise ParseError(f"unexpected header keyword {words[0]!r}", path, line=lineno, offset=offset)
        offset += len(line) + 1
    if fmt is None:
        raise ParseError("PLY header has no format line", path, offset=0)
    return fmt, elements, body_start, raw[:body_start].count(b"\n")


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    fmt, elements, start, header_lines = _parse_ply_header(raw, path)
    names = [e.name for e in elements]
    if "vertex" not in names:
        raise ParseError("PLY has no vertex element", path, offset=0)
    vi = names.index("vertex")
    vertex = elements[vi]
    pnames = [p[0] for p in vertex.props]
    if not {"x", "y", "z"} <= set(pnames):
        raise ParseError("vertex element lacks x/y/z properties", path, offset=0)
    if fmt == "ascii":
        return _read_ply_ascii(raw[start:], elements, vi, pnames, header_lines, path)
    endian = "<" if fmt == "binary_little_endian" else ">"
    pos = start
    for e in elements[:vi]:
        if any(isinstance(t, tuple) for _, t in e.props):
            pos = _skip_list_element(raw, pos, e, endian, path)
        else:
            pos += e.count * np.dtype([(n, endian + t) for n, t in e.props]).itemsize
    if any(isinstance(t, tuple) for _, t in vertex.props):
        raise ParseError("list properties on vertices are not supported", path, offset=start)
    dt = np.dtype([(n, endian + t) for n, t in vertex.props])
    need = vertex.count * dt.itemsize
    if pos + need > len(raw):
        raise ParseError(f"vertex block truncated: need {need} bytes, have {len(raw) - pos}",
                         path, offset=len(raw))
    rec = np.frombuffer(raw, dtype=dt, count=vertex.count, offset=pos)
    pts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(float)
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise ParseError("non-finite vertex coordinate", path, offset=pos + int(np.argmax(bad)) * dt.itemsize)
    return _finish(pts, None, path)


def _skip_list_element(raw, pos, e, endian, path):
    for _ in range(e.count):
        for _, t in e.props:
            if isinstance(t, tuple):
                cdt = np.dtype(endian + t[1])
                if pos + cdt.itemsize > len(raw):
                    raise ParseError("truncated list property", path, offset=pos)
                n = int(np.frombuffer(raw, cdt, 1, pos)[0])
                pos += cdt.itemsize + n * np.dtype(t[2]).itemsize
            else:
                pos += np.dtype(t).itemsize
    return pos


def _read_ply_ascii(body: bytes, elements, vi, pnames, header_lines, path) -> PointCloud:
    lines = body.decode("ascii", "replace").splitlines()
    first = sum(e.count for e in elements[:vi])
    count = elements[vi].count
    if len(lines) < first + count:
        raise ParseError(f"expected {count} vertex lines, found {max(0, len(lines) - first)}",
                         path, line=header_lines + len(lines) + 1)
    cols = [pnames.index(c) for c in "xyz"]
    pts = np.empty((count, 3))
    for k in range(count):
        lineno = header_lines + first + k + 1
        vals = _floats(lines[first + k], len(pnames), path, lineno)
        pts[k] = [vals[c] for c in cols]
        if not np.isfinite(pts[k]).all():
            raise ParseError("non-finite vertex coordinate", path, line=lineno)
    return _finish(pts, None, path)


def load_point_cloud(path, fmt: str | None = None) -> PointCloud:
    path = Path(path)
    if fmt is None:
        fmt = {".xyz": "xyz", ".txt": "xyz", ".ply": "ply", ".grid": "scanner_grid"}.get(path.suffix.lower())
        if fmt is None:
            raise ValueError(f"cannot infer the format of {path}; pass one of {FORMATS}")
    if fmt not in FORMATS:
        raise ValueError(f"unknown point-cloud format {fmt!r}; expected one of {FORMATS}")
    if not path.exists():
        raise FileNotFoundError(path)
    return {"xyz": read_xyz, "ply": read_ply, "scanner_grid": read_scanner_grid}[fmt](path)


def _num(v) -> str:
    return repr(float(v))


def write_xyz(path, cloud: PointCloud) -> None:
    np.savetxt(path, cloud.valid_points, fmt="%.17g")


def write_ply(path, cloud: PointCloud, binary: bool = True) -> None:
    pts = np.asarray(cloud.valid_points, dtype="<f8")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
              "property double x\nproperty double y\nproperty double z\nend_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.tobytes())
        else:
            for p in pts:
                fh.write((" ".join(map(_num, p)) + "\n").encode("ascii"))


def write_scanner_grid(path, points: np.ndarray, valid: np.ndarray, rows: int, cols: int) -> None:
    points = np.asarray(points, dtype=float).reshape(rows * cols, 3)
    valid = np.asarray(valid, dtype=bool).reshape(rows * cols)
    with open(path, "w") as fh:
        fh.write(f"{rows} {cols}\n")
        for p, v in zip(points, valid):
            fh.write(" ".join(map(_num, p)) + f" {int(v)}\n")


# ---------------------------------------------------------------- depth grids

def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths of the row-major mask, starting with a run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def rle_decode(runs, shape) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != np.prod(shape):
        raise ValueError("run lengths do not cover the grid")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(shape)


def write_depth_grid(stem, grid: DepthGrid) -> tuple[Path, Path]:
    """``stem.csv`` holds z (invalid pixels empty); ``stem.json`` the geometry and mask."""
    stem = Path(stem)
    csv_path, meta_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row, ok in zip(grid.z, grid.mask):
            w.writerow([repr(float(v)) if m else "" for v, m in zip(row, ok)])
    meta = {"origin": [float(grid.x[0]), float(grid.y[0])], "resolution": grid.resolution,
            "shape": list(grid.shape), "mask_rle": rle_encode(grid.mask)}
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")
    return csv_path, meta_path


def read_depth_grid(stem) -> DepthGrid:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    shape = tuple(meta["shape"])
    mask = rle_decode(meta["mask_rle"], shape)
    z = np.full(shape, np.nan)
    with open(stem.with_suffix(".csv"), newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if len(row) != shape[1]:
                raise ParseError(f"expected {shape[1]} columns", stem.with_suffix(".csv"), line=i + 1)
            z[i] = [float(v) if v else np.nan for v in row]
    x0, y0 = meta["origin"]
    return DepthGrid.from_origin(x0, y0, meta["resolution"], z, mask)


# ---------------------------------------------------------------- landmarks

LANDMARK_HEADER = (["sample_id"] + [f"{n}{c}" for n in LANDMARK_NAMES for c in "xyz"]
                   + ["theta_opt", "status"])


def write_landmarks_csv(path, rows) -> None:
    """``rows``: iterable of (sample_id, LandmarkSet or None, status)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LANDMARK_HEADER)
        for sid, lms, status in rows:
            if lms is None:
                w.writerow([sid] + [""] * 22 + [status])
            else:
                w.writerow([sid] + [repr(float(v)) for v in lms.as_array().ravel()]
                           + [repr(float(lms.theta)), status])


def read_landmarks_csv(path) -> dict[str, LandmarkSet | None]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LANDMARK_HEADER:
            raise ParseError("unexpected landmark CSV header", path, line=1)
        for n, row in enumerate(reader, 2):
            if len(row) != len(LANDMARK_HEADER):
                raise ParseError("wrong column count", path, line=n)
            if row[1] == "":
                out[row[0]] = None
                continue
            arr = np.array([float(v) for v in row[1:22]]).reshape(7, 3)
            out[row[0]] = LandmarkSet.from_array(arr, theta=float(row[22]))
    return out


# ---------------------------------------------------------------- features

def write_features(stem, sample_ids, features: list[FeatureVector]) -> tuple[Path, Path]:
    """Little-endian float32 records, one per sample, plus a JSON sidecar."""
    if not features:
        raise ValueError("no feature vectors to write")
    f0 = features[0]
    for f in features:
        if (f.s_n, f.K, f.h_l, f.kind) != (f0.s_n, f0.K, f0.h_l, f0.kind):
            raise ValueError("feature vectors have different layouts")
    stem = Path(stem)
    bin_path, meta_path = stem.with_suffix(".f32"), stem.with_suffix(".json")
    data = np.stack([f.values for f in features]).astype("<f4")
    bin_path.write_bytes(data.tobytes())
    meta = {"s_n": f0.s_n, "K": f0.K, "h_l": f0.h_l, "kind": f0.kind,
            "length": int(data.shape[1]), "strides": list(f0.strides),
            "layout": ["scale", "component", "descriptor", "bin"],
            "dtype": "<f4", "sample_ids": list(map(str, sample_ids)),
            "flags": [np.asarray(f.flags, dtype=int).tolist() for f in features]}
    meta_path.write_text(json.dumps(meta) + "\n")
    return bin_path, meta_path


def read_features(stem) -> tuple[list[str], np.ndarray, dict]:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".f32").read_bytes()
    n, length = len(meta["sample_ids"]), meta["length"]
    if len(raw) != 4 * n * length:
        raise ParseError(f"expected {4 * n * length} bytes, found {len(raw)}",
                         stem.with_suffix(".f32"), offset=len(raw))
    X = np.frombuffer(raw, dtype="<f4").reshape(n, length).astype(float)
    return meta["sample_ids"], X, meta


# ---------------------------------------------------------------- masks and tables

def write_mask_json(path, Bn, kind: str, config: dict, seed: int, r1: float) -> None:
    Bn = np.asarray(Bn, dtype=bool)
    rec = {"descriptor": kind, "K": int(Bn.size), "bits": "".join("1" if b else "0" for b in Bn),
           "config": config, "seed": int(seed), "r1": float(r1)}
    Path(path).write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")


def read_mask_json(path) -> tuple[np.ndarray, dict]:
    rec = json.loads(Path(path).read_text())
    bits = rec.get("bits", "")
    if set(bits) - {"0", "1"} or len(bits) != rec.get("K"):
        raise ParseError("mask bits malformed or inconsistent with K", path)
    return np.array([b == "1" for b in bits]), rec


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_score_matrix(path, D, gallery_ids, probe_ids) -> None:
    rows = [[g] + ["" if np.isnan(v) else repr(float(v)) for v in row] for g, row in zip(gallery_ids, D)]
    write_table(path, ["gallery\\probe"] + list(probe_ids), rows)


def write_cmc(path, cmc) -> None:
    write_table(path, ["rank", "rate"], [(k + 1, float(r)) for k, r in enumerate(cmc)])


def write_roc(path, far, tar) -> None:
    write_table(path, ["FAR", "TAR"], zip(map(float, far), map(float, tar)))


def write_history(path, history) -> None:
    write_table(path, ["generation", "bestR1", "meanR1", "bestCardinality"], history)


def read_manifest(path) -> list[dict]:
    """Rows of a manifest CSV with columns sample_id, path, format, subject, expression, session."""
    required = ("sample_id", "path", "format", "subject", "expression", "session")
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ParseError(f"manifest lacks columns {missing}", path, line=1)
        rows = []
        for n, row in enumerate(reader, 2):
            if any(row[c] in (None, "") for c in ("sample_id", "path", "subject")):
                raise ParseError("empty sample_id, path or subject", path, line=n)
            row = {k: (v or "") for k, v in row.items()}
            if not Path(row["path"]).is_absolute():
                row["path"] = str(path.parent / row["path"])
            row["line"] = n
            rows.append(row)
    ids = [r["sample_id"] for r in rows]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ParseError(f"duplicate sample ids {dup[:5]}", path)
    return rows


def write_manifest(path, rows) -> None:
    cols = ["sample_id", "path", "format", "subject", "expression", "session"]
    write_table(path, cols, ([r[c] for c in cols] for r in rows))

