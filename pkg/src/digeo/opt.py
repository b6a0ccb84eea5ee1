"""Geodesic centroidal Voronoi tessellation: Lloyd iterations and Mesh-LBFGS.

Seeds live on the product manifold M^S.  The log map of each seed is
approximated by *developing* a multi-source shortest-path tree: every edge
displacement along a tree path is projected into the tangent plane at its
tail, carried back to the seed's plane with the accumulated vertex-normal
rotations, and summed.  On flat meshes this reproduces ``x - s`` exactly.

The energy is ``1/(2S) sum_i sum_{x in cell i} A(x) |log_{s_i}(x)|^2`` with
vertex areas A and unit density.  Its descent direction for seed i is the
area-weighted mean of the log vectors of its cell.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .mesh import Mesh, SurfacePoint, embed_many
from .sampling import sample_directions, sample_points
from .tracer import TraceConfig, apply_rotations, trace_batch


@dataclass
class SeedSet:
    faces: np.ndarray
    barys: np.ndarray

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1)
        self.barys = np.asarray(self.barys, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def points(self) -> list[SurfacePoint]:
        return [SurfacePoint(int(f), tuple(b)) for f, b in zip(self.faces, self.barys)]

    def positions(self, m: Mesh) -> np.ndarray:
        return embed_many(m, self.faces, self.barys)

    @classmethod
    def from_points(cls, pts) -> "SeedSet":
        return cls([p.face for p in pts], [p.bary for p in pts])


@dataclass
class VoronoiPartition:
    assignment: np.ndarray   # (N,) seed index per vertex
    distances: np.ndarray    # (N,) |log|
    logs: np.ndarray         # (N,3) approximate log vectors in the seed's face plane
    n_seeds: int

    def cell(self, i: int) -> np.ndarray:
        return np.nonzero(self.assignment == i)[0]


# ---------------------------------------------------------------------------
# developing multi-source Dijkstra
# ---------------------------------------------------------------------------

@njit(cache=True)
def _align(a, b):
    """Minimal rotation matrix taking unit a onto unit b."""
    c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    k = np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])
    R = np.eye(3)
    if c <= -1.0 + 1e-12:
        return R  # opposite normals do not occur on meshes without folds
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return R + K + (K @ K) / (1.0 + c)


@njit(cache=True)
def _voronoi_kernel(X, F, VN, nbr_ptr, nbr, seed_pos, seed_face, seed_normal):
    n = X.shape[0]
    dist = np.full(n, np.inf)
    assign = np.full(n, -1, np.int64)
    disp = np.zeros((n, 3))
    T = np.zeros((n, 3, 3))
    heap = [(0.0, np.int64(0), np.int64(0))]
    heap.pop()
    for s in range(seed_pos.shape[0]):
        for k in range(3):
            j = F[seed_face[s], k]
            d = X[j] - seed_pos[s]
            key = math.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)
            if key < dist[j] or (key == dist[j] and s < assign[j]):
                dist[j] = key
                assign[j] = s
                disp[j] = d
                T[j] = _align(VN[j], seed_normal[s])
                heapq.heappush(heap, (key, np.int64(j), np.int64(s)))
    # each vertex is settled once: developed lengths are not path-consistent,
    # so re-relaxing settled vertices would cycle on round-off
    done = np.zeros(n, np.bool_)
    while len(heap) > 0:
        key, x, s = heapq.heappop(heap)
        if done[x] or s != assign[x] or key > dist[x]:
            continue
        done[x] = True
        nx = VN[x]
        for q in range(nbr_ptr[x], nbr_ptr[x + 1]):
            y = nbr[q]
            if done[y]:
                continue
            e = X[y] - X[x]
            le = math.sqrt(e[0] ** 2 + e[1] ** 2 + e[2] ** 2)
            et = e - (e[0] * nx[0] + e[1] * nx[1] + e[2] * nx[2]) * nx
            lt = math.sqrt(et[0] ** 2 + et[1] ** 2 + et[2] ** 2)
            if lt > 0.0:
                et *= le / lt
            dy = disp[x] + T[x] @ et
            ky = math.sqrt(dy[0] ** 2 + dy[1] ** 2 + dy[2] ** 2)
            if ky < dist[y] or (ky == dist[y] and s < assign[y]):
                dist[y] = ky
                assign[y] = s
                disp[y] = dy
                T[y] = T[x] @ _align(VN[y], nx)
                heapq.heappush(heap, (ky, np.int64(y), np.int64(s)))
    return assign, dist, disp


def _neighbors(m: Mesh):
    cache = getattr(m, "_nbr_cache", None)
    if cache is None:
        E = m.edges
        both = np.concatenate([E, E[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        ptr = np.zeros(m.n_vertices + 1, np.int64)
        np.add.at(ptr, both[:, 0] + 1, 1)
        cache = (np.cumsum(ptr), np.ascontiguousarray(both[:, 1]))
        m._nbr_cache = cache
    return cache


def voronoi(m: Mesh, seeds: SeedSet) -> VoronoiPartition:
    """Assign every vertex to the seed with the smallest developed distance (ties: lowest index)."""
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    ptr, nbr = _neighbors(m)
    pos = seeds.positions(m)
    assign, dist, disp = _voronoi_kernel(m.vertices, m.faces, m.vertex_normals, ptr, nbr, pos,
                                         seeds.faces, np.ascontiguousarray(m.face_normals[seeds.faces]))
    return VoronoiPartition(assign, dist, disp, len(seeds))


def karcher_directions(m: Mesh, part: VoronoiPartition) -> np.ndarray:
    """(S,3) area-weighted mean log vector per cell; zero for empty cells."""
    A = m.vertex_area
    S = part.n_seeds
    ok = part.assignment >= 0
    num = np.zeros((S, 3))
    np.add.at(num, part.assignment[ok], A[ok, None] * part.logs[ok])
    den = np.bincount(part.assignment[ok], weights=A[ok], minlength=S)
    out = np.zeros((S, 3))
    nz = den > 0
    out[nz] = num[nz] / den[nz, None]
    return out


def karcher_direction(m: Mesh, part: VoronoiPartition, i: int) -> np.ndarray:
    return karcher_directions(m, part)[i]


def gcvt_energy(m: Mesh, seeds: SeedSet, part: VoronoiPartition | None = None) -> float:
    if part is None:
        part = voronoi(m, seeds)
    A = m.vertex_area
    ok = part.assignment >= 0
    return float(np.sum(A[ok] * part.distances[ok] ** 2) / (2.0 * len(seeds)))


# ---------------------------------------------------------------------------
# objective with call counting
# ---------------------------------------------------------------------------

class GcvtObjective:
    """Energy and gradient surrogate ``-v`` at a seed set; counts distinct evaluations."""

    def __init__(self, m: Mesh):
        self.m = m
        self.calls = 0
        self._key = None
        self._val = None

    def __call__(self, seeds: SeedSet) -> tuple[float, np.ndarray]:
        key = seeds.faces.tobytes() + seeds.barys.tobytes()
        if key == self._key:
            return self._val
        self.calls += 1
        part = voronoi(self.m, seeds)
        val = (gcvt_energy(self.m, seeds, part), -karcher_directions(self.m, part))
        self._key, self._val = key, val
        return val


def exp_seeds(m: Mesh, seeds: SeedSet, V: np.ndarray, workers: int | None = None):
    """Product-manifold exponential map; returns the new seeds and per-seed transports."""
    res = trace_batch(m, seeds.faces, seeds.barys, V, TraceConfig(), workers=workers)
    return SeedSet(res.face, res.bary), res.rotation


def lloyd_step(m: Mesh, seeds: SeedSet, eta: float = 1.0, objective: GcvtObjective | None = None):
    """One Lloyd move ``s_i <- Exp_{s_i}(eta v_i)``; returns (new seeds, energy before the move)."""
    objective = objective or GcvtObjective(m)
    E, g = objective(seeds)
    new, _ = exp_seeds(m, seeds, -eta * g)
    return new, E


def lloyd(m: Mesh, seeds0: SeedSet, iters: int, eta: float = 1.0, objective: GcvtObjective | None = None):
    """Run Lloyd's algorithm; trajectory rows are (iteration, energy, cumulative calls)."""
    obj = objective or GcvtObjective(m)
    seeds = seeds0
    traj = []
    for t in range(iters + 1):
        E, g = obj(seeds)
        traj.append((t, E, obj.calls))
        if t == iters:
            break
        seeds, _ = exp_seeds(m, seeds, -eta * g)
    return seeds, traj


# ---------------------------------------------------------------------------
# Mesh-LBFGS
# ---------------------------------------------------------------------------

def inner(U: np.ndarray, W: np.ndarray) -> float:
    """Product metric: sum of per-seed Euclidean inner products."""
    return float(np.sum(U * W))


@dataclass
class LbfgsMemory:
    """Stored pairs, newest last; ``Q[k]`` transports from the previous pair's point to pair k's."""

    A: list = field(default_factory=list)
    B: list = field(default_factory=list)
    Q: list = field(default_factory=list)
    H_diag: float = 1.0
    depth: int = 8
    pending: np.ndarray | None = None  # transport accumulated over skipped updates

    def push(self, A, B, Q):
        if self.pending is not None:
            Q = np.einsum("nij,njk->nik", Q, self.pending)
            self.pending = None
        self.A.append(A)
        self.B.append(B)
        self.Q.append(Q)
        if len(self.A) > self.depth:
            del self.A[0], self.B[0], self.Q[0]

    def skip(self, Q):
        self.pending = Q if self.pending is None else np.einsum("nij,njk->nik", Q, self.pending)

    def clear(self):
        self.A.clear()
        self.B.clear()
        self.Q.clear()
        self.pending = None
        self.H_diag = 1.0


def _transport(Q, V):
    return apply_rotations(Q, V)


def _transport_adjoint(Q, V):
    return apply_rotations(np.swapaxes(Q, 1, 2), V)


def desc(V: np.ndarray, t: int, mem: LbfgsMemory) -> np.ndarray:
    """Recursive two-sided quasi-Newton update of ``V`` using the newest ``t`` pairs.

    Level k removes the component along pair k, moves the remainder back to
    the previous iterate with the adjoint transport, recurses, transports the
    result forward and applies the rank-two correction.  With no pairs left
    it returns ``H_diag V``.
    """
    n = len(mem.A)
    t = min(t, n)
    if t <= 0:
        return mem.H_diag * V
    if mem.pending is not None:
        # the newest pair lives at an earlier iterate (later updates were skipped)
        W = _desc(_transport_adjoint(mem.pending, V), n - 1, n - t, mem)
        return _transport(mem.pending, W)
    return _desc(V, n - 1, n - t, mem)


def _desc(V, k, stop, mem):
    if k < stop:
        return mem.H_diag * V
    A, B, Q = mem.A[k], mem.B[k], mem.Q[k]
    ba = inner(B, A)
    av = inner(A, V)
    Vt = V - (av / ba) * B
    Vh = _transport(Q, _desc(_transport_adjoint(Q, Vt), k - 1, stop, mem))
    return Vh - (inner(B, Vh) / ba) * A + (av / ba) * A


@dataclass
class LbfgsConfig:
    eta0: float = 0.5
    memory: int = 8
    c1: float = 1e-4
    max_iter: int = 50
    grad_tol: float = 0.0
    shrink: tuple = (1.0, 0.1, 0.01)


def mesh_lbfgs(m: Mesh, seeds0: SeedSet, objective: Callable | None = None,
               cfg: LbfgsConfig | None = None, workers: int | None = None,
               callback: Callable | None = None):
    """Riemannian L-BFGS on M^S.

    ``objective(seeds) -> (energy, grad)`` with ``grad`` an (S,3) array of
    tangent vectors.  Each iteration tries the step sizes ``eta0 * shrink``
    in order and accepts the first satisfying the sufficient-decrease rule;
    if none does, the smallest candidate that lowers the energy is taken,
    otherwise the run stops.  Returns (seeds, trajectory) with trajectory
    rows (iteration, energy, cumulative objective calls).
    """
    cfg = cfg or LbfgsConfig()
    obj = objective or GcvtObjective(m)
    calls = _CallCounter(obj)
    mem = LbfgsMemory(depth=cfg.memory)
    S = seeds0
    f, g = calls(S)
    traj = [(0, f, calls.count)]
    for it in range(1, cfg.max_iter + 1):
        if math.sqrt(inner(g, g)) <= cfg.grad_tol:
            break
        V = desc(-g, it - 1, mem)
        slope = inner(g, V)
        if not slope < 0:
            mem.clear()
            V = -g
            slope = inner(g, V)
        accepted = None
        fallback = None
        for factor in cfg.shrink:
            a = cfg.eta0 * factor
            S_new, Q = exp_seeds(m, S, a * V, workers)
            f_new, g_new = calls(S_new)
            if f_new <= f + cfg.c1 * a * slope:
                accepted = (a, S_new, Q, f_new, g_new)
                break
            if f_new < f:
                fallback = (a, S_new, Q, f_new, g_new)
        if accepted is None:
            accepted = fallback
        if accepted is None:
            break
        a, S_new, Q, f_new, g_new = accepted
        A = _transport(Q, a * V)
        B = g_new - _transport(Q, g)
        ab = inner(A, B)
        if ab > 0 and inner(B, B) > 0:
            mem.push(A, B, Q)
            mem.H_diag = ab / inner(B, B)
        else:
            mem.skip(Q)  # curvature breakdown: keep transports consistent, drop the pair
        S, f, g = S_new, f_new, g_new
        traj.append((it, f, calls.count))
        if callback is not None:
            callback(it, S, f)
    return S, traj


class _CallCounter:
    def __init__(self, obj):
        self.obj = obj
        self.count = 0
        self._key = None
        self._val = None

    def __call__(self, S: SeedSet):
        key = S.faces.tobytes() + S.barys.tobytes()
        if key != self._key:
            self.count += 1
            self._key, self._val = key, self.obj(S)
        return self._val


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def uniform_seeds(m: Mesh, n: int, rng: np.random.Generator) -> SeedSet:
    f, b = sample_points(m, n, rng)
    return SeedSet(f, b)


def clustered_seeds(m: Mesh, n: int, rng: np.random.Generator, radius: float | None = None) -> SeedSet:
    """Seeds scattered within geodesic distance ``radius`` of one random point.

    The default radius is 0.1 times the square root of the surface area.
    """
    if radius is None:
        radius = 0.1 * math.sqrt(m.total_area)
    f, b = sample_points(m, 1, rng)
    d = sample_directions(m, np.repeat(f, n), rng)
    r = radius * np.sqrt(rng.uniform(size=n))
    res = trace_batch(m, np.repeat(f, n), np.repeat(b, n, axis=0), d * r[:, None])
    return SeedSet(res.face, res.bary)
