"""Point cloud / mesh file I/O and area-weighted mesh sampling.

Supported formats (all ASCII, coordinates in meters):

* ``.ply`` -- ``element vertex N`` with float x y z, optional
  ``element face M`` with ``property list uchar int vertex_indices``
* ``.pcd`` -- FIELDS x y z, SIZE 4, TYPE F, DATA ascii
* anything else -- one ``x y z`` triple per line, ``#`` comments allowed
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateMesh, ParseError
from .geom import PointCloud, RigidTransform


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64, copy=True).reshape(-1, 3)
        if len(f) and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(t.apply(self.vertices), self.triangles)

    @staticmethod
    def merge(meshes) -> "TriangleMesh":
        verts, tris, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        if not verts:
            return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), np.int64))
        return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


@dataclass(frozen=True)
class SamplingConfig:
    sample_count: int
    rng_seed: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def sample_mesh(mesh: TriangleMesh, cfg: SamplingConfig) -> PointCloud:
    """Draw ``cfg.sample_count`` points uniformly by area over the mesh surface."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0.0:
        raise DegenerateMesh("mesh has zero total area")
    rng = np.random.default_rng(cfg.rng_seed)
    cdf = np.cumsum(areas) / total
    tri = np.searchsorted(cdf, rng.random(cfg.sample_count), side="right")
    # guards the u ~ 1 - eps case against cdf[-1] rounding below 1
    tri = np.minimum(tri, np.flatnonzero(areas > 0)[-1])
    r = rng.random((cfg.sample_count, 2))
    s = np.sqrt(r[:, 0])
    wa = 1.0 - s
    wb = s * (1.0 - r[:, 1])
    wc = s * r[:, 1]
    f = mesh.triangles[tri]
    v = mesh.vertices
    pts = wa[:, None] * v[f[:, 0]] + wb[:, None] * v[f[:, 1]] + wc[:, None] * v[f[:, 2]]
    return PointCloud(pts)


# -- readers ---------------------------------------------------------------


def _floats(tokens, lineno, path, n=3):
    if len(tokens) < n:
        raise ParseError(f"expected {n} numbers, got {len(tokens)}", lineno, path)
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"non-numeric value in {' '.join(tokens)!r}", lineno, path) from None
    if not all(np.isfinite(vals)):
        raise ParseError("non-finite coordinate", lineno, path)
    return vals


def _as_stored(a: np.ndarray, single: bool) -> np.ndarray:
    # values declared float32 are rounded to that precision
    return a.astype(np.float32).astype(np.float64) if single else a


def _read_ply(path: str, lines: list[str]):
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1, path)
    elements = []  # [name, count, [props], list_prop?]
    ptypes = {}
    i = 1
    fmt_ok = False
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError("only ASCII PLY is supported", i, path)
            fmt_ok = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", i, path)
            try:
                elements.append([tok[1], int(tok[2]), []])
            except ValueError:
                raise ParseError("element count is not an integer", i, path) from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before element", i, path)
            elements[-1][2].append(tok[-1] if tok[1] != "list" else ("list", tok[-1]))
            if tok[1] != "list":
                ptypes[(elements[-1][0], tok[-1])] = tok[1]
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"unknown header keyword {tok[0]!r}", i, path)
    else:
        raise ParseError("missing end_header", len(lines), path)
    if not fmt_ok:
        raise ParseError("missing format line", None, path)

    verts = np.empty((0, 3))
    faces = np.empty((0, 3), np.int64)
    for name, count, props in elements:
        rows = []
        for _ in range(count):
            while i < len(lines) and not lines[i].strip():
                i += 1
            if i >= len(lines):
                raise ParseError(f"unexpected end of file in element {name!r}", i, path)
            rows.append((i + 1, lines[i].split()))
            i += 1
        if name == "vertex":
            try:
                ix = [props.index(a) for a in ("x", "y", "z")]
            except ValueError:
                raise ParseError("vertex element lacks x/y/z", None, path) from None
            verts = np.empty((count, 3))
            for j, (ln, tok) in enumerate(rows):
                if len(tok) != len(props):
                    raise ParseError(f"expected {len(props)} values, got {len(tok)}", ln, path)
                vals = _floats([tok[k] for k in ix], ln, path)
                verts[j] = vals
            verts = _as_stored(verts, all(ptypes[("vertex", a)] in ("float", "float32") for a in "xyz"))
        elif name == "face":
            out = []
            for ln, tok in rows:
                try:
                    cnt = int(tok[0])
                    idx = [int(t) for t in tok[1 : 1 + cnt]]
                except (ValueError, IndexError):
                    raise ParseError("malformed face row", ln, path) from None
                if cnt < 3 or len(idx) != cnt:
                    raise ParseError("face needs >= 3 indices", ln, path)
                for k in range(1, cnt - 1):  # fan-triangulate polygons
                    out.append((idx[0], idx[k], idx[k + 1]))
            faces = np.array(out, np.int64).reshape(-1, 3)
            if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
                raise ParseError("face index out of range", None, path)
    return verts, faces


def _read_pcd(path: str, lines: list[str]) -> np.ndarray:
    fields = None
    sizes = None
    npts = None
    i = 0
    while i < len(lines):
        tok = lines[i].split()
        i += 1
        if not tok or tok[0].startswith("#"):
            continue
        key = tok[0].upper()
        if key == "FIELDS":
            fields = tok[1:]
        elif key == "SIZE":
            sizes = tok[1:]
        elif key == "POINTS":
            npts = int(tok[1])
        elif key == "DATA":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError("only DATA ascii is supported", i, path)
            break
    else:
        raise ParseError("missing DATA line", len(lines), path)
    if fields is None:
        raise ParseError("missing FIELDS line", None, path)
    try:
        ix = [fields.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise ParseError("FIELDS lacks x/y/z", None, path) from None
    pts = []
    for ln in range(i, len(lines)):
        tok = lines[ln].split()
        if not tok:
            continue
        if len(tok) != len(fields):
            raise ParseError(f"expected {len(fields)} values, got {len(tok)}", ln + 1, path)
        pts.append(_floats([tok[k] for k in ix], ln + 1, path))
    if npts is not None and npts != len(pts):
        raise ParseError(f"header declares {npts} points, found {len(pts)}", None, path)
    single = sizes is None or len(sizes) != len(fields) or all(sizes[k] == "4" for k in ix)
    return _as_stored(np.array(pts, dtype=np.float64).reshape(-1, 3), single)


def _read_xyz(path: str, lines: list[str]) -> np.ndarray:
    pts = []
    for ln, line in enumerate(lines, start=1):
        s = line.split("#", 1)[0].split()
        if not s:
            continue
        if len(s) != 3:
            raise ParseError(f"expected 3 numbers, got {len(s)}", ln, path)
        pts.append(_floats(s, ln, path))
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def _lines(path) -> list[str]:
    return Path(path).read_text(encoding="ascii", errors="replace").splitlines()


def load_cloud(path) -> PointCloud:
    path = str(path)
    lines = _lines(path)
    ext = Path(path).suffix.lower()
    if ext == ".ply":
        pts, _ = _read_ply(path, lines)
    elif ext == ".pcd":
        pts = _read_pcd(path, lines)
    else:
        pts = _read_xyz(path, lines)
    return PointCloud(pts)


def load_mesh(path) -> TriangleMesh:
    path = str(path)
    verts, faces = _read_ply(path, _lines(path))
    return TriangleMesh(verts, faces)


# -- writers ---------------------------------------------------------------


def _fmt32(pts: np.ndarray) -> str:
    # shortest repr that round-trips float32
    p = np.asarray(pts, dtype=np.float32)
    return "\n".join(
        " ".join(np.format_float_positional(v, unique=True, trim="-") for v in row) for row in p
    )


def save_cloud(cloud: PointCloud, path) -> None:
    """Write a cloud; PLY and PCD store float32, other extensions full precision."""
    path = Path(path)
    ext = path.suffix.lower()
    n = len(cloud)
    if ext == ".ply":
        head = f"ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
        body = _fmt32(cloud.points)
    elif ext == ".pcd":
        head = (
            "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z\nSIZE 4 4 4\n"
            f"TYPE F F F\nCOUNT 1 1 1\nWIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA ascii\n"
        )
        body = _fmt32(cloud.points)
    else:
        head = ""
        body = "\n".join(" ".join(repr(v) for v in row) for row in cloud.points.tolist())
    path.write_text(head + body + ("\n" if n else ""), encoding="ascii")


def save_mesh(mesh: TriangleMesh, path) -> None:
    nv, nf = len(mesh.vertices), len(mesh.triangles)
    head = (
        f"ply\nformat ascii 1.0\nelement vertex {nv}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {nf}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    faces = "\n".join(f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist())
    Path(path).write_text(head + _fmt32(mesh.vertices) + "\n" + faces + ("\n" if nf else ""), encoding="ascii")
