"""Straightest-geodesic tracing: exponential map, parallel transport, batches.

A geodesic is traced face by face.  Inside a face it is a straight segment;
across an edge the two faces are unfolded flat; through a vertex it leaves
so that the angle on its left equals the angle on its right (half of the
vertex's total angle each).  Any payload vector is carried along by the same
sequence of rotations as the direction itself.
"""

from __future__ import annotations

import enum
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .errors import BoundaryHit, NumericalStall
from .mesh import Location, Mesh, SurfacePoint, TangentVector, classify, embed_many


class TraceStatus(enum.IntEnum):
    LENGTH_REACHED = K.LENGTH_REACHED
    BOUNDARY = K.BOUNDARY
    MAX_STEPS = K.MAX_STEPS
    NUMERICAL_STALL = K.STALL
    INVALID_INPUT = K.BAD_INPUT


def default_max_steps(m: Mesh) -> int:
    return int(10 * math.sqrt(m.n_faces) + 100)


@dataclass
class TraceConfig:
    max_steps: int | None = None  # None -> 10 sqrt(F) + 100
    hole_avoidance: bool = False
    transport_payload: np.ndarray | None = None

    def __post_init__(self):
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def steps_for(self, m: Mesh) -> int:
        return default_max_steps(m) if self.max_steps is None else int(self.max_steps)


@dataclass
class GeodesicTrace:
    points: list[SurfacePoint]
    segment_lengths: np.ndarray
    final_point: SurfacePoint
    final_dir: np.ndarray
    traced_length: float
    terminated_by: TraceStatus
    rotation: np.ndarray = field(repr=False)
    payload: np.ndarray | None = None
    steps: int = 0

    def transport(self, w: np.ndarray) -> np.ndarray:
        """Parallel transport of a tangent vector at the start to the end point."""
        return self.rotation @ np.asarray(w, dtype=float)

    def transport_back(self, w: np.ndarray) -> np.ndarray:
        """Adjoint transport from the end point back to the start."""
        return self.rotation.T @ np.asarray(w, dtype=float)

    def polyline(self, m: Mesh) -> np.ndarray:
        f = np.array([p.face for p in self.points])
        b = np.array([p.bary for p in self.points])
        return embed_many(m, f, b)

    def to_json(self) -> dict:
        return {
            "points": [p.to_json() for p in self.points],
            "segment_lengths": self.segment_lengths.tolist(),
            "final_point": self.final_point.to_json(),
            "final_dir": self.final_dir.tolist(),
            "traced_length": self.traced_length,
            "terminated_by": self.terminated_by.name,
            "payload": None if self.payload is None else self.payload.tolist(),
        }

    def to_obj_polyline(self, m: Mesh) -> str:
        X = self.polyline(m)
        lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in X]
        if len(X) > 1:
            lines.append("l " + " ".join(str(i + 1) for i in range(len(X))))
        return "\n".join(lines) + "\n"


def apply_rotations(R: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Row-wise ``R[i] @ P[i]`` with a fixed summation order."""
    return R[:, :, 0] * P[:, 0:1] + R[:, :, 1] * P[:, 1:2] + R[:, :, 2] * P[:, 2:3]


def _worker_count(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("DIGEO_WORKERS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


@dataclass
class BatchRequest:
    mesh: Mesh
    starts: Sequence[SurfacePoint]
    dirs: Sequence[TangentVector] | np.ndarray
    config: TraceConfig = field(default_factory=TraceConfig)

    def __post_init__(self):
        if len(self.starts) != len(self.dirs):
            raise ValueError("starts and dirs must have the same length")

    def arrays(self):
        faces = np.array([p.face for p in self.starts], dtype=np.int64)
        barys = np.array([p.bary for p in self.starts], dtype=np.float64).reshape(-1, 3)
        if isinstance(self.dirs, np.ndarray):
            vecs = self.dirs
        else:
            for p, v in zip(self.starts, self.dirs):
                if v.anchor != p:
                    raise ValueError("each direction must be anchored at its start point")
            vecs = np.array([v.dir for v in self.dirs], dtype=np.float64)
        return faces, barys, np.asarray(vecs, dtype=np.float64).reshape(-1, 3)


@dataclass
class TraceBatch:
    """Struct-of-arrays result of :func:`trace_batch`; row ``i`` answers request ``i``."""

    face: np.ndarray
    bary: np.ndarray
    dir: np.ndarray
    length: np.ndarray
    status: np.ndarray
    rotation: np.ndarray
    steps: np.ndarray
    n_points: np.ndarray
    path_ptr: np.ndarray | None = None
    path_face: np.ndarray | None = None
    path_bary: np.ndarray | None = None
    path_seg: np.ndarray | None = None
    payload: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.face)

    def endpoints(self, m: Mesh) -> np.ndarray:
        return embed_many(m, self.face, self.bary)

    def final_point(self, i: int) -> SurfacePoint:
        return SurfacePoint(int(self.face[i]), tuple(self.bary[i]))

    def error(self, i: int) -> str | None:
        s = TraceStatus(int(self.status[i]))
        if s in (TraceStatus.NUMERICAL_STALL, TraceStatus.INVALID_INPUT):
            return s.name
        return None

    def __getitem__(self, i: int) -> GeodesicTrace:
        if self.path_ptr is None:
            raise ValueError("batch was traced without path recording")
        lo, hi = self.path_ptr[i], self.path_ptr[i + 1]
        pts = [SurfacePoint(int(f), tuple(b)) for f, b in zip(self.path_face[lo:hi], self.path_bary[lo:hi])]
        return GeodesicTrace(
            points=pts,
            segment_lengths=self.path_seg[lo + 1:hi].copy(),
            final_point=self.final_point(i),
            final_dir=self.dir[i].copy(),
            traced_length=float(self.length[i]),
            terminated_by=TraceStatus(int(self.status[i])),
            rotation=self.rotation[i].copy(),
            payload=None if self.payload is None else self.payload[i].copy(),
            steps=int(self.steps[i]),
        )

    def same_as(self, other: "TraceBatch") -> bool:
        """Bit-for-bit equality of all per-trace outputs."""
        names = ("face", "bary", "dir", "length", "status", "rotation", "steps", "n_points")
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


def _run_chunks(M, faces, barys, vecs, max_steps, hole, out, rec, record, workers):
    n = len(faces)
    if n == 0:
        return
    workers = min(workers, n)
    args = lambda lo, hi: (M, faces, barys, vecs, max_steps, hole, lo, hi, *out, *rec, record)
    if workers == 1:
        K.trace_range(*args(0, n))
        return
    # several chunks per worker keep the pool busy when trace costs vary
    bounds = np.linspace(0, n, 4 * workers + 1).astype(np.int64)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futs = [ex.submit(K.trace_range, *args(int(lo), int(hi)))
                for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        for f in futs:
            f.result()


def trace_batch(m: Mesh, faces, barys, vecs, cfg: TraceConfig | None = None,
                workers: int | None = None, record_path: bool = False,
                payloads: np.ndarray | None = None) -> TraceBatch:
    """Trace ``len(faces)`` geodesics; ``vecs[i]`` holds direction times length.

    Each trace is an independent task over the shared read-only mesh, so the
    result does not depend on ``workers``.  Failed traces are reported through
    their ``status`` slot rather than raised.
    """
    cfg = cfg or TraceConfig()
    faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1)
    barys = np.ascontiguousarray(barys, dtype=np.float64).reshape(-1, 3)
    vecs = np.ascontiguousarray(vecs, dtype=np.float64).reshape(-1, 3)
    n = len(faces)
    if len(barys) != n or len(vecs) != n:
        raise ValueError("faces, barys and vecs must have the same length")
    workers = _worker_count(workers)
    M = m.kernel_arrays()
    ms = cfg.steps_for(m)
    out = (np.empty(n, np.int64), np.empty((n, 3)), np.empty((n, 3)), np.empty(n),
           np.empty(n, np.int64), np.empty((n, 3, 3)), np.empty(n, np.int64), np.empty(n, np.int64))
    empty_rec = (np.zeros(n + 1, np.int64), np.empty(0, np.int64), np.empty((0, 3)), np.empty(0))
    _run_chunks(M, faces, barys, vecs, ms, cfg.hole_avoidance, out, empty_rec, False, workers)
    res = TraceBatch(*out)
    if record_path:
        # second pass with exactly-sized path buffers (identical arithmetic)
        ptr = np.zeros(n + 1, np.int64)
        np.cumsum(res.n_points, out=ptr[1:])
        rec = (ptr, np.empty(ptr[-1], np.int64), np.empty((ptr[-1], 3)), np.empty(ptr[-1]))
        out2 = tuple(np.empty_like(a) for a in out)
        _run_chunks(M, faces, barys, vecs, ms, cfg.hole_avoidance, out2, rec, True, workers)
        res.path_ptr, res.path_face, res.path_bary, res.path_seg = rec
    if payloads is not None:
        P = np.asarray(payloads, dtype=np.float64).reshape(-1, 3)
        res.payload = apply_rotations(res.rotation, P)
    elif cfg.transport_payload is not None:
        P = np.broadcast_to(np.asarray(cfg.transport_payload, dtype=np.float64), (n, 3))
        res.payload = apply_rotations(res.rotation, P)
    return res


def run_batch(req: BatchRequest, workers: int | None = None, record_path: bool = False) -> TraceBatch:
    faces, barys, vecs = req.arrays()
    return trace_batch(req.mesh, faces, barys, vecs, req.config, workers=workers, record_path=record_path)


def _as_vec(v) -> np.ndarray:
    if isinstance(v, TangentVector):
        return np.asarray(v.dir, dtype=np.float64)
    return np.asarray(v, dtype=np.float64)


def trace(m: Mesh, p: SurfacePoint, v, cfg: TraceConfig | None = None) -> GeodesicTrace:
    """Exp_p(v) with the full polyline; ``v`` is a TangentVector or ambient 3-vector."""
    cfg = cfg or TraceConfig()
    if isinstance(v, TangentVector) and v.anchor != p:
        raise ValueError("tangent vector is anchored at a different point")
    vec = _as_vec(v)
    payload = None if cfg.transport_payload is None else np.asarray(cfg.transport_payload, dtype=float)[None]
    res = trace_batch(m, [p.face], [p.bary], vec[None], cfg, workers=1, record_path=True, payloads=payload)
    st = TraceStatus(int(res.status[0]))
    if st == TraceStatus.NUMERICAL_STALL:
        raise NumericalStall(f"trace from face {p.face} could not advance")
    if st == TraceStatus.INVALID_INPUT:
        raise ValueError("invalid start point")
    return res[0]


def exp_map(m: Mesh, p: SurfacePoint, v, cfg: TraceConfig | None = None) -> SurfacePoint:
    return trace(m, p, v, cfg).final_point


# ---------------------------------------------------------------------------
# single-step primitives (thin wrappers over the compiled kernels)
# ---------------------------------------------------------------------------

def geodesic_step(m: Mesh, p: SurfacePoint, v, remaining: float | None = None):
    """Advance one face-crossing step.

    Returns ``(p', v', step_length)``; ``v'`` is the transported direction with
    the same norm as ``v``.
    """
    vec = _as_vec(v)
    nv = float(np.linalg.norm(vec))
    remaining = nv if remaining is None else float(remaining)
    if nv == 0.0 or remaining <= 0.0:
        return p, vec.copy(), 0.0
    b = np.array(p.bary, dtype=float)
    d = vec / nv
    Q = np.eye(3)
    z = np.empty(0, np.int64)
    f, traced, status, _, _ = K.trace_one(m.kernel_arrays(), p.face, b, d, remaining, 1, False, Q,
                                          z, np.empty((0, 3)), np.empty(0), 0)
    if status == K.STALL:
        raise NumericalStall("no positive exit parameter")
    return SurfacePoint(int(f), tuple(b)), d * nv, float(traced)


def transport_over_edge(m: Mesh, f: int, b, v):
    """Re-express an edge point in the neighbouring face and unfold ``v`` onto it."""
    loc, k = classify(b)
    if loc != Location.EDGE:
        raise ValueError("point is not on an edge")
    bb = np.array(b, dtype=float)
    bb[k] = 0.0
    bb /= bb.sum()
    d = _as_vec(v).copy()
    Q = np.eye(3)
    nv = float(np.linalg.norm(d))
    g = K.cross_edge(m.kernel_arrays(), f, k, bb, d, Q)
    if g < 0:
        raise BoundaryHit("edge is on the boundary")
    return SurfacePoint(int(g), tuple(bb)), d * nv


def transport_over_vertex(m: Mesh, f: int, b, v):
    """Continue direction ``v`` arriving at a vertex with equal left and right angles.

    ``f`` must be the face the path arrives through, i.e. the face whose
    corner at the vertex contains the ray ``-v``.
    """
    loc, k = classify(b)
    if loc != Location.VERTEX:
        raise ValueError("point is not a vertex")
    bb = np.zeros(3)
    bb[k] = 1.0
    d = _as_vec(v).copy()
    nv = float(np.linalg.norm(d))
    Q = np.eye(3)
    g = K.cross_vertex(m.kernel_arrays(), f, k, bb, d, Q)
    if g < 0:
        raise BoundaryHit(f"vertex {m.faces[f, k]} is on the boundary")
    return SurfacePoint(int(g), tuple(bb)), d * nv


def boundary_continue(m: Mesh, p: SurfacePoint, v):
    """Hole-avoidance move from a boundary point.

    Returns ``(p', v')``: either ``p'`` equals the boundary vertex and ``v'``
    is the saved direction projected into the best incident face, or the
    boundary is followed to the next vertex along the edge best aligned
    with ``v``.
    """
    vec = _as_vec(v)
    nv = float(np.linalg.norm(vec))
    if nv == 0.0:
        return p, vec.copy()
    M = m.kernel_arrays()
    loc, k = classify(p.bary)
    f = p.face
    b = np.array(p.bary, dtype=float)
    if loc == Location.EDGE:
        if m.face_adjacency[f, k] >= 0:
            raise ValueError("point is not on a boundary edge")
        a, c = (k + 1) % 3, (k + 2) % 3
        X = embed_many(m, np.array([f]), b[None])[0]
        ta = m.vertices[m.faces[f, a]] - X
        tc = m.vertices[m.faces[f, c]] - X
        k = a if ta @ vec >= tc @ vec else c
        b[:] = 0.0
        b[k] = 1.0
    elif loc != Location.VERTEX:
        raise ValueError("point is not on the boundary")
    x = int(m.faces[f, k])
    if not m.boundary_vertex[x]:
        raise ValueError("point is not on the boundary")
    b[:] = 0.0
    b[k] = 1.0
    d = vec / nv
    saved = d.copy()
    Q = np.eye(3)
    out = np.empty(1, np.int64)
    code = K.boundary_vertex_step(M, x, f, b, d, saved, Q, -1, out)
    if code == K._STUCK:
        raise BoundaryHit("no way to continue along the boundary")
    if code == K._RESUMED:
        return SurfacePoint(int(out[0]), tuple(b)), d * nv
    # slide to the next boundary vertex
    g = int(out[0])
    kg = int(np.argmax(b))
    y = -1
    for j in range(3):
        if j != kg:
            e = m.vertices[m.faces[g, j]] - m.vertices[x]
            if abs(np.linalg.norm(e) - abs(e @ d)) < 1e-9 * np.linalg.norm(e):
                y = j
    if y < 0:
        return SurfacePoint(g, tuple(b)), d * nv
    b = np.zeros(3)
    b[y] = 1.0
    return SurfacePoint(g, tuple(b)), d * nv


def traces_to_json(traces: Sequence[GeodesicTrace]) -> str:
    return json.dumps({"schema": "digeo.traces/1", "traces": [t.to_json() for t in traces]})
