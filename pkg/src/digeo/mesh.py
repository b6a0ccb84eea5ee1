"""Immutable triangle mesh with face adjacency, vertex fans and surface points.

Adjacency is stored per face as the index of the face across each edge
(edge ``k`` is the edge opposite local vertex ``k``), which keeps the
structure valid for non-orientable input.  Every face corner belongs to a
*fan*: the ordered chain of faces around a vertex obtained by walking
adjacency.  The tracer uses fans to apply the equal-angle rule at vertices.
"""

from __future__ import annotations

import enum
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from numba import njit

from .errors import DegenerateFaceError, NonManifoldError, ParseError

logger = logging.getLogger("digeo")

# barycentric snap threshold for vertex / edge classification
TAU_CLS = 1e-10


class Location(enum.IntEnum):
    INTERIOR = 0
    EDGE = 1
    VERTEX = 2


@dataclass(frozen=True)
class SurfacePoint:
    """A point on a mesh: face index plus barycentric coordinates."""

    face: int
    bary: tuple[float, float, float]

    def __post_init__(self) -> None:
        b = tuple(float(x) for x in self.bary)
        if len(b) != 3:
            raise ValueError("bary must have three components")
        if min(b) < -1e-9 or max(b) > 1 + 1e-9 or abs(sum(b) - 1.0) > 1e-9:
            raise ValueError(f"barycentric coordinates {b} are not in the 2-simplex")
        object.__setattr__(self, "face", int(self.face))
        object.__setattr__(self, "bary", b)

    @classmethod
    def vertex(cls, mesh: "Mesh", v: int) -> "SurfacePoint":
        f, k = mesh.vertex_corner(v)
        b = [0.0, 0.0, 0.0]
        b[k] = 1.0
        return cls(f, tuple(b))

    def to_json(self) -> dict:
        return {"face": self.face, "bary": list(self.bary)}

    @classmethod
    def from_json(cls, obj: dict) -> "SurfacePoint":
        return cls(int(obj["face"]), tuple(obj["bary"]))

    def to_csv_row(self) -> str:
        return f"{self.face},{self.bary[0]!r},{self.bary[1]!r},{self.bary[2]!r}"

    @classmethod
    def from_csv_row(cls, row: str) -> "SurfacePoint":
        parts = [p.strip() for p in row.split(",")]
        if len(parts) != 4:
            raise ParseError(f"expected 'face,b0,b1,b2', got {row!r}")
        return cls(int(parts[0]), (float(parts[1]), float(parts[2]), float(parts[3])))


@dataclass(frozen=True)
class TangentVector:
    """Ambient 3-vector lying in the plane of its anchor face."""

    anchor: SurfacePoint
    dir: np.ndarray

    def check(self, mesh: "Mesh") -> None:
        d = np.asarray(self.dir, dtype=float)
        n = mesh.face_normals[self.anchor.face]
        if abs(float(d @ n)) > 1e-8 * max(float(np.linalg.norm(d)), 1e-300):
            raise ValueError("tangent vector does not lie in its anchor face plane")


def classify(bary: Sequence[float], tau: float = TAU_CLS) -> tuple[Location, int | None]:
    """Classify a barycentric point as interior, edge (opposite vertex k) or vertex k."""
    b = np.asarray(bary, dtype=float)
    k = int(np.argmax(b))
    if b[k] >= 1.0 - tau:
        return Location.VERTEX, k
    j = int(np.argmin(b))
    if b[j] <= tau:
        return Location.EDGE, j
    return Location.INTERIOR, None


# ---------------------------------------------------------------------------
# OBJ parsing
# ---------------------------------------------------------------------------

def parse_obj(source: bytes | str | BinaryIO | Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse vertices and (fan-triangulated) faces from ASCII OBJ data."""
    if isinstance(source, Path):
        text = source.read_text(encoding="utf-8")
    elif isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data

    verts: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "v":
            if len(tok) < 4:
                raise ParseError(f"line {lineno}: vertex needs 3 coordinates")
            try:
                verts.append([float(t) for t in tok[1:4]])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
        elif tok[0] == "f":
            if len(tok) < 4:
                raise ParseError(f"line {lineno}: face needs at least 3 vertices")
            idx = []
            for t in tok[1:]:
                head = t.split("/", 1)[0]
                try:
                    i = int(head)
                except ValueError:
                    raise ParseError(f"line {lineno}: bad face index {t!r}") from None
                if i == 0:
                    raise ParseError(f"line {lineno}: OBJ indices are 1-based")
                idx.append(i - 1 if i > 0 else len(verts) + i)
            for j in range(1, len(idx) - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
        # normals, uvs, groups, materials are ignored
    if not verts or not faces:
        raise ParseError("OBJ contains no vertices or no faces")
    V = np.asarray(verts, dtype=np.float64)
    F = np.asarray(faces, dtype=np.int64)
    if F.min() < 0 or F.max() >= len(V):
        raise ParseError("face index out of range")
    return V, F


def load_mesh(source: bytes | str | BinaryIO | Path) -> "Mesh":
    """Build a :class:`Mesh` from OBJ bytes, text, a binary stream or a path."""
    if isinstance(source, str) and "\n" not in source and Path(source).exists():
        source = Path(source)
    V, F = parse_obj(source)
    return Mesh(V, F)


def save_obj(mesh: "Mesh", path: str | Path) -> None:
    Path(path).write_text(mesh_to_obj(mesh), encoding="utf-8")


def mesh_to_obj(mesh: "Mesh") -> str:
    out = io.StringIO()
    for x, y, z in mesh.vertices.tolist():
        out.write(f"v {x!r} {y!r} {z!r}\n")
    for a, b, c in (mesh.faces + 1).tolist():
        out.write(f"f {a} {b} {c}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# fan construction
# ---------------------------------------------------------------------------

@njit(cache=True)
def _local_index(faces, f, v):
    for j in range(3):
        if faces[f, j] == v:
            return j
    return -1


@njit(cache=True)
def _build_fans(faces, adj, corner_angle):
    nf = faces.shape[0]
    corner_fan = -np.ones((nf, 3), np.int64)
    corner_pos = -np.ones((nf, 3), np.int64)
    n_corner = 3 * nf
    fan_face = np.empty(n_corner, np.int64)
    fan_corner = np.empty(n_corner, np.int64)
    fan_svert = np.empty(n_corner, np.int64)
    fan_evert = np.empty(n_corner, np.int64)
    fan_offset = np.empty(n_corner, np.float64)
    fan_ptr = np.zeros(n_corner + 1, np.int64)
    fan_total = np.empty(n_corner, np.float64)
    fan_closed = np.zeros(n_corner, np.bool_)
    fan_vertex = np.empty(n_corner, np.int64)
    n_fans = 0
    pos = 0
    for f0 in range(nf):
        for k0 in range(3):
            if corner_fan[f0, k0] >= 0:
                continue
            x = faces[f0, k0]
            # orient f0 as (start=a, end=c) and walk backwards across the start edge
            a = faces[f0, (k0 + 1) % 3]
            c = faces[f0, (k0 + 2) % 3]
            f = f0
            s = a
            e = c
            closed = False
            guard = 0
            while True:
                guard += 1
                if guard > n_corner:
                    break
                # edge (x, s) is opposite the vertex e in face f
                g = adj[f, _local_index(faces, f, e)]
                if g < 0:
                    break
                if g == f0:
                    closed = True
                    break
                kx = _local_index(faces, g, x)
                other = -1
                for j in range(3):
                    vj = faces[g, j]
                    if vj != x and vj != s:
                        other = vj
                # in g the shared vertex s is the end and the other vertex the start
                e = s
                s = other
                f = g
            if closed:
                f = f0
                s = a
                e = c
            start = pos
            angle = 0.0
            while True:
                k = _local_index(faces, f, x)
                corner_fan[f, k] = n_fans
                corner_pos[f, k] = pos - start
                fan_face[pos] = f
                fan_corner[pos] = k
                fan_svert[pos] = s
                fan_evert[pos] = e
                fan_offset[pos] = angle
                angle += corner_angle[f, k]
                pos += 1
                # cross the end edge (x, e), opposite vertex s
                g = adj[f, _local_index(faces, f, s)]
                if g < 0 or g == fan_face[start] or corner_fan[g, _local_index(faces, g, x)] >= 0:
                    break
                other = -1
                for j in range(3):
                    vj = faces[g, j]
                    if vj != x and vj != e:
                        other = vj
                s = e
                e = other
                f = g
            fan_total[n_fans] = angle
            fan_closed[n_fans] = closed
            fan_vertex[n_fans] = x
            n_fans += 1
            fan_ptr[n_fans] = pos
    return (corner_fan, corner_pos, fan_ptr[: n_fans + 1], fan_face, fan_corner,
            fan_svert, fan_evert, fan_offset, fan_total[:n_fans], fan_closed[:n_fans],
            fan_vertex[:n_fans])


# ---------------------------------------------------------------------------
# closest point queries
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _closest_on_triangle(p, a, b, c):
    """Closest point on triangle abc to p (Ericson); returns barycentrics."""
    ab0 = b[0] - a[0]; ab1 = b[1] - a[1]; ab2 = b[2] - a[2]
    ac0 = c[0] - a[0]; ac1 = c[1] - a[1]; ac2 = c[2] - a[2]
    ap0 = p[0] - a[0]; ap1 = p[1] - a[1]; ap2 = p[2] - a[2]
    d1 = ab0 * ap0 + ab1 * ap1 + ab2 * ap2
    d2 = ac0 * ap0 + ac1 * ap1 + ac2 * ap2
    if d1 <= 0.0 and d2 <= 0.0:
        return 1.0, 0.0, 0.0
    bp0 = p[0] - b[0]; bp1 = p[1] - b[1]; bp2 = p[2] - b[2]
    d3 = ab0 * bp0 + ab1 * bp1 + ab2 * bp2
    d4 = ac0 * bp0 + ac1 * bp1 + ac2 * bp2
    if d3 >= 0.0 and d4 <= d3:
        return 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return 1.0 - v, v, 0.0
    cp0 = p[0] - c[0]; cp1 = p[1] - c[1]; cp2 = p[2] - c[2]
    d5 = ab0 * cp0 + ab1 * cp1 + ab2 * cp2
    d6 = ac0 * cp0 + ac1 * cp1 + ac2 * cp2
    if d6 >= 0.0 and d5 <= d6:
        return 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return 1.0 - v - w, v, w


@njit(cache=True, nogil=True)
def closest_point_bruteforce(V, F, p):
    """Project ``p`` onto every face and keep the nearest; O(F)."""
    best = np.inf
    bf = -1
    bb0 = 0.0; bb1 = 0.0; bb2 = 0.0
    for f in range(F.shape[0]):
        a = V[F[f, 0]]
        b = V[F[f, 1]]
        c = V[F[f, 2]]
        u, v, w = _closest_on_triangle(p, a, b, c)
        q0 = u * a[0] + v * b[0] + w * c[0] - p[0]
        q1 = u * a[1] + v * b[1] + w * c[1] - p[1]
        q2 = u * a[2] + v * b[2] + w * c[2] - p[2]
        d = q0 * q0 + q1 * q1 + q2 * q2
        if d < best:
            best = d
            bf = f
            bb0 = u; bb1 = v; bb2 = w
    return bf, bb0, bb1, bb2, math.sqrt(best)


# ---------------------------------------------------------------------------
# Mesh
# ---------------------------------------------------------------------------

def _readonly(*arrays: np.ndarray) -> None:
    for a in arrays:
        a.flags.writeable = False


class Mesh:
    """Immutable triangle mesh ``{X, F}`` with all derived per-face / per-vertex data.

    Construction validates the input: repeated indices or zero-area faces raise
    :class:`DegenerateFaceError`, edges with three or more incident faces raise
    :class:`NonManifoldError`.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray) -> None:
        V = np.ascontiguousarray(vertices, dtype=np.float64)
        F = np.ascontiguousarray(faces, dtype=np.int64)
        if V.ndim != 2 or V.shape[1] != 3 or F.ndim != 2 or F.shape[1] != 3:
            raise ValueError("vertices must be (N,3) and faces (F,3)")
        n = len(V)
        if F.size and (F.min() < 0 or F.max() >= n):
            raise ValueError("face indices out of range")
        bad = (F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 0] == F[:, 2])
        if bad.any():
            raise DegenerateFaceError(f"face {int(np.flatnonzero(bad)[0])} repeats a vertex")

        x0, x1, x2 = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
        cross = np.cross(x1 - x0, x2 - x0)
        dbl_area = np.linalg.norm(cross, axis=1)
        e_len = np.stack([np.linalg.norm(x2 - x1, axis=1),
                          np.linalg.norm(x0 - x2, axis=1),
                          np.linalg.norm(x1 - x0, axis=1)], axis=1)
        scale = e_len.max(axis=1) ** 2
        degenerate = dbl_area <= 1e-12 * scale
        if degenerate.any():
            raise DegenerateFaceError(f"face {int(np.flatnonzero(degenerate)[0])} has zero area")

        self.vertices = V
        self.faces = F
        self.face_normals = cross / dbl_area[:, None]
        self.face_areas = 0.5 * dbl_area
        self.edge_lengths = e_len  # edge k is opposite local vertex k

        # interior angles per corner
        ang = np.empty((len(F), 3))
        for k in range(3):
            a = V[F[:, (k + 1) % 3]] - V[F[:, k]]
            b = V[F[:, (k + 2) % 3]] - V[F[:, k]]
            ang[:, k] = np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.einsum("ij,ij->i", a, b))
        self.corner_angles = ang

        self._build_adjacency()

        self.vertex_total_angle = np.bincount(F.ravel(), weights=ang.ravel(), minlength=n)
        self.vertex_area = np.bincount(F.ravel(), weights=np.repeat(self.face_areas / 3.0, 3), minlength=n)
        vn = np.zeros((n, 3))
        for k in range(3):
            np.add.at(vn, F[:, k], self.face_normals * ang[:, k:k + 1])
        norms = np.linalg.norm(vn, axis=1)
        norms[norms == 0] = 1.0
        self.vertex_normals = vn / norms[:, None]

        # barycentric direction map: d -> (bv1, bv2) with d = bv1 (x1-x0) + bv2 (x2-x0)
        M = np.stack([x1 - x0, x2 - x0], axis=2)  # (F,3,2)
        MtM = np.einsum("fik,fil->fkl", M, M)
        self.face_pinv = np.einsum("fkl,fil->fki", np.linalg.inv(MtM), M)  # (F,2,3)

        (self.corner_fan, self.corner_fan_pos, self.fan_ptr, self.fan_face, self.fan_corner,
         self.fan_svert, self.fan_evert, self.fan_offset, self.fan_total, self.fan_closed,
         self.fan_vertex) = _build_fans(F, self.face_adjacency, ang)
        order = np.argsort(self.fan_vertex, kind="stable")
        self.vertex_fans = order.astype(np.int64)
        self.vertex_fan_ptr = np.zeros(n + 1, np.int64)
        np.cumsum(np.bincount(self.fan_vertex, minlength=n), out=self.vertex_fan_ptr[1:])

        self.boundary_vertex = np.zeros(n, dtype=bool)
        be = self.face_adjacency < 0
        for k in range(3):
            rows = be[:, k]
            self.boundary_vertex[F[rows, (k + 1) % 3]] = True
            self.boundary_vertex[F[rows, (k + 2) % 3]] = True
        self.mean_edge_length = float(np.linalg.norm(V[self.edges[:, 0]] - V[self.edges[:, 1]], axis=1).mean())

        _readonly(self.vertices, self.faces, self.face_normals, self.face_areas, self.edge_lengths,
                  self.corner_angles, self.face_adjacency, self.face_adjacency_corner, self.edges,
                  self.vertex_total_angle, self.vertex_area, self.vertex_normals, self.face_pinv,
                  self.boundary_vertex)

    def _build_adjacency(self) -> None:
        F = self.faces
        nf = len(F)
        # half-edge k of face f is opposite local vertex k
        a = np.concatenate([F[:, 1], F[:, 2], F[:, 0]])
        b = np.concatenate([F[:, 2], F[:, 0], F[:, 1]])
        keys = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1)
        face_of = np.tile(np.arange(nf), 3)
        local = np.repeat(np.arange(3), nf)
        uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        if (counts > 2).any():
            e = uniq[np.flatnonzero(counts > 2)[0]]
            raise NonManifoldError(f"edge ({e[0]}, {e[1]}) is shared by more than two faces")
        order = np.argsort(inv, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)])
        adj = -np.ones((nf, 3), np.int64)
        adj_k = -np.ones((nf, 3), np.int64)
        pairs = np.flatnonzero(counts == 2)
        h0 = order[starts[pairs]]
        h1 = order[starts[pairs] + 1]
        f0, k0 = face_of[h0], local[h0]
        f1, k1 = face_of[h1], local[h1]
        if np.any(f0 == f1):
            raise NonManifoldError("a face is adjacent to itself")
        adj[f0, k0] = f1
        adj_k[f0, k0] = k1
        adj[f1, k1] = f0
        adj_k[f1, k1] = k0
        self.face_adjacency = adj
        self.face_adjacency_corner = adj_k
        self.edges = uniq.astype(np.int64)
        self.edge_face_count = counts

    # -- basic queries -----------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    def __repr__(self) -> str:
        return f"Mesh(N={self.n_vertices}, F={self.n_faces})"

    def vertex_corner(self, v: int) -> tuple[int, int]:
        """Return one (face, local index) pair where vertex ``v`` appears."""
        fan = self.vertex_fans[self.vertex_fan_ptr[v]]
        i = self.fan_ptr[fan]
        return int(self.fan_face[i]), int(self.fan_corner[i])

    def embed(self, p: SurfacePoint) -> np.ndarray:
        return embed(p, self)

    def kernel_arrays(self) -> tuple:
        """Flat arrays consumed by the compiled tracing kernels."""
        return (self.vertices, self.faces, self.face_adjacency, self.face_adjacency_corner,
                self.face_normals, self.face_pinv, self.corner_fan, self.corner_fan_pos,
                self.fan_ptr, self.fan_face, self.fan_corner, self.fan_svert, self.fan_evert,
                self.fan_offset, self.corner_angles, self.fan_total, self.fan_closed,
                self.vertex_fan_ptr, self.vertex_fans)


def embed(p: SurfacePoint, m: Mesh) -> np.ndarray:
    """Ambient position ``b_u x0 + b_v x1 + b_w x2`` of a surface point."""
    idx = m.faces[p.face]
    return np.asarray(p.bary) @ m.vertices[idx]


def embed_many(m: Mesh, faces: np.ndarray, barys: np.ndarray) -> np.ndarray:
    X = m.vertices[m.faces[faces]]
    b = np.asarray(barys, dtype=np.float64)
    # explicit sum keeps the arithmetic identical for any batch size
    return b[:, 0:1] * X[:, 0] + b[:, 1:2] * X[:, 1] + b[:, 2:3] * X[:, 2]


def total_angle(v: int, m: Mesh) -> float:
    """Sum of the interior angles of all faces meeting at vertex ``v``."""
    return float(m.vertex_total_angle[v])


def project_point(m: Mesh, x: np.ndarray) -> tuple[SurfacePoint, float]:
    """Closest point on the mesh to ``x`` (brute force) and its distance."""
    f, b0, b1, b2, dist = closest_point_bruteforce(m.vertices, m.faces, np.asarray(x, dtype=np.float64))
    b = np.clip([b0, b1, b2], 0.0, 1.0)
    b /= b.sum()
    return SurfacePoint(int(f), tuple(b)), float(dist)


def concatenate_meshes(meshes: Iterable[Mesh]) -> tuple[Mesh, np.ndarray]:
    """Stack meshes into one disconnected mesh; returns it and the per-mesh face offsets."""
    meshes = list(meshes)
    v_off = np.cumsum([0] + [m.n_vertices for m in meshes])
    f_off = np.cumsum([0] + [m.n_faces for m in meshes])
    V = np.concatenate([m.vertices for m in meshes])
    F = np.concatenate([m.faces + v_off[i] for i, m in enumerate(meshes)])
    return Mesh(V, F), f_off


def points_to_json(points: Sequence[SurfacePoint]) -> str:
    return json.dumps([p.to_json() for p in points])


def read_points_csv(path: str | Path) -> list[SurfacePoint]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for r in rows:
        r = r.strip()
        if not r or r.startswith("face"):
            continue
        out.append(SurfacePoint.from_csv_row(r))
    return out


def write_points_csv(path: str | Path, points: Sequence[SurfacePoint]) -> None:
    lines = ["face,b0,b1,b2"] + [p.to_csv_row() for p in points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
