"""Jacobians of the mesh exponential map.

Two schemes are provided:

* Extrinsic proxy (EP): the Jacobian with respect to ``v`` is the rotation
  that carries the start frame ``(v_par, v_perp, n)`` onto its parallel
  transport at the end point; the Jacobian with respect to ``p`` is zero.
  The backward pass therefore just transports the upstream gradient back.
* Geodesic finite differences (GFD): columns are obtained by retracing
  geodesics from intrinsically perturbed initial conditions and projecting
  the endpoint differences into the end face's barycentric frame.

Jacobians are 2x2 matrices between local frames.  A frame exposes a 3x2
``basis`` and its 2x3 left inverse ``pinv``; ambient gradients enter a frame
through ``basis.T`` and leave it through ``pinv.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDirection, PerturbationEscaped
from .mesh import Mesh, SurfacePoint, embed_many
from .tracer import GeodesicTrace, TraceConfig, TraceStatus, trace, trace_batch


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------

@dataclass
class TangentFrame:
    """Orthonormal frame (v_par, v_perp = n x v_par, n) at a surface point."""

    origin: SurfacePoint
    e_par: np.ndarray
    e_perp: np.ndarray
    normal: np.ndarray

    @classmethod
    def from_vector(cls, m: Mesh, p: SurfacePoint, v) -> "TangentFrame":
        n = m.face_normals[p.face].copy()
        v = np.asarray(v, dtype=float)
        v = v - (v @ n) * n
        nv = np.linalg.norm(v)
        if nv < 1e-12:
            raise DegenerateDirection("|v| < 1e-12")
        e = v / nv
        return cls(p, e, np.cross(n, e), n)

    @property
    def basis(self) -> np.ndarray:
        return np.stack([self.e_par, self.e_perp], axis=1)

    @property
    def pinv(self) -> np.ndarray:
        return self.basis.T

    def matrix(self) -> np.ndarray:
        """3x3 matrix with columns (e_par, e_perp, n)."""
        return np.stack([self.e_par, self.e_perp, self.normal], axis=1)


def bary_basis(m: Mesh, faces) -> tuple[np.ndarray, np.ndarray]:
    """Per face (u_hat, v_hat) as (F,3,2) bases and their (F,2,3) pseudo-inverses."""
    X = m.vertices[m.faces[np.asarray(faces)]]
    u = X[..., 1, :] - X[..., 0, :]
    w = X[..., 2, :] - X[..., 0, :]
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    w = w / np.linalg.norm(w, axis=-1, keepdims=True)
    B = np.stack([u, w], axis=-1)
    BtB = np.swapaxes(B, -1, -2) @ B
    return B, np.linalg.solve(BtB, np.swapaxes(B, -1, -2))


@dataclass
class BaryFrame:
    """Frame of unit edge directions u_hat = (x1-x0)/|x1-x0|, v_hat = (x2-x0)/|x2-x0|."""

    origin: SurfacePoint
    u_hat: np.ndarray
    v_hat: np.ndarray
    pseudo_inverse: np.ndarray

    @classmethod
    def at(cls, m: Mesh, p: SurfacePoint) -> "BaryFrame":
        B, P = bary_basis(m, p.face)
        return cls(p, B[:, 0].copy(), B[:, 1].copy(), P)

    @property
    def basis(self) -> np.ndarray:
        return np.stack([self.u_hat, self.v_hat], axis=1)

    @property
    def pinv(self) -> np.ndarray:
        return self.pseudo_inverse


@dataclass
class JacobianPair:
    J_v: np.ndarray
    J_p: np.ndarray
    frame_in_v: TangentFrame
    frame_in_p: BaryFrame
    frame_out: BaryFrame
    rotation_EP: np.ndarray | None = None
    transport: np.ndarray | None = field(default=None, repr=False)
    degraded: tuple[bool, bool, bool, bool] = (False, False, False, False)

    def lift_v(self) -> np.ndarray:
        """Ambient 3x3 Jacobian d Exp / d v acting on tangent vectors at p."""
        if self.rotation_EP is not None:
            return self.rotation_EP @ (self.frame_in_v.basis @ self.frame_in_v.pinv)
        return self.frame_out.basis @ self.J_v @ self.frame_in_v.pinv

    def lift_p(self) -> np.ndarray:
        return self.frame_out.basis @ self.J_p @ self.frame_in_p.pinv


def to_frame(g_ambient, frame) -> np.ndarray:
    """Ambient covector into frame coordinates (``basis.T g``)."""
    return frame.basis.T @ np.asarray(g_ambient, dtype=float)


def to_ambient(g2, frame) -> np.ndarray:
    """Frame covector back to an ambient gradient (``pinv.T g``)."""
    return frame.pinv.T @ np.asarray(g2, dtype=float)


def pullback(g_out, jac: JacobianPair) -> tuple[np.ndarray, np.ndarray]:
    """Chain rule: (J_v^T g, J_p^T g) for ``g`` given in ``jac.frame_out``."""
    g = np.asarray(g_out, dtype=float)
    return jac.J_v.T @ g, jac.J_p.T @ g


def pullback_ambient(g_ambient, jac: JacobianPair) -> tuple[np.ndarray, np.ndarray]:
    """Ambient gradient at p' to ambient gradients w.r.t. v and p."""
    g = np.asarray(g_ambient, dtype=float)
    if jac.rotation_EP is not None:
        gv = jac.rotation_EP.T @ g
        P = jac.frame_in_v.basis
        return P @ (P.T @ gv), np.zeros(3)
    gv, gp = pullback(to_frame(g, jac.frame_out), jac)
    return to_ambient(gv, jac.frame_in_v), to_ambient(gp, jac.frame_in_p)


def to_matched_frames(jac: JacobianPair) -> tuple[np.ndarray, np.ndarray]:
    """Express J_v and J_p in the (v_par, v_perp) frame at p and its transport to p'.

    In these coordinates both Jacobians are the identity on a flat mesh.
    """
    E = jac.frame_in_v.basis
    Q = jac.transport if jac.transport is not None else np.eye(3)
    T = Q @ E
    Jv = T.T @ jac.lift_v() @ E
    Jp = T.T @ jac.lift_p() @ E
    return Jv, Jp


# ---------------------------------------------------------------------------
# extrinsic proxy
# ---------------------------------------------------------------------------

def ep_rotation(m: Mesh, p: SurfacePoint, v, tr: GeodesicTrace) -> np.ndarray:
    """R = M_end M_start^T with M = [dir, n x dir, n] at both ends."""
    M0 = TangentFrame.from_vector(m, p, v).matrix()
    n1 = m.face_normals[tr.final_point.face]
    d1 = tr.final_dir - (tr.final_dir @ n1) * n1
    d1 /= np.linalg.norm(d1)
    M1 = np.stack([d1, np.cross(n1, d1), n1], axis=1)
    return M1 @ M0.T


def ep_jacobians(m: Mesh, p: SurfacePoint, v, tr: GeodesicTrace | None = None) -> JacobianPair:
    v = np.asarray(v, dtype=float)
    if np.linalg.norm(v) < 1e-12:
        raise DegenerateDirection("|v| < 1e-12")
    if tr is None:
        tr = trace(m, p, v)
    R = ep_rotation(m, p, v, tr)
    return JacobianPair(
        J_v=np.eye(2), J_p=np.zeros((2, 2)),
        frame_in_v=TangentFrame.from_vector(m, p, v),
        frame_in_p=BaryFrame.at(m, p),
        frame_out=BaryFrame.at(m, tr.final_point),
        rotation_EP=R, transport=tr.rotation,
    )


def ep_backward(m: Mesh, faces, barys, vecs, end_faces, end_dirs, g_ambient) -> np.ndarray:
    """Batched EP backward pass: rotate ambient end gradients back to T_p."""
    n0 = m.face_normals[faces]
    v = vecs - np.sum(vecs * n0, axis=1, keepdims=True) * n0
    e0 = v / np.linalg.norm(v, axis=1, keepdims=True)
    n1 = m.face_normals[end_faces]
    d1 = end_dirs - np.sum(end_dirs * n1, axis=1, keepdims=True) * n1
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    g = g_ambient
    # coordinates in the end frame, re-expanded in the start frame (tangent part only)
    a = np.sum(g * d1, axis=1)
    b = np.sum(g * np.cross(n1, d1), axis=1)
    return a[:, None] * e0 + b[:, None] * np.cross(n0, e0)


# ---------------------------------------------------------------------------
# geodesic finite differences
# ---------------------------------------------------------------------------

@dataclass
class GfdConfig:
    """Finite-difference steps; ``None`` means ``rel`` times the mean edge length.

    Nearby straightest geodesics only separate differently from flat ones
    when a vertex lies between them, so steps much smaller than an edge
    reproduce the flat (EP-like) Jacobian.  One edge length is the default.
    """

    eps_v: float | None = None
    eps_p: float | None = None
    rel: float = 1.0

    def resolve(self, m: Mesh) -> tuple[float, float]:
        h = self.rel * m.mean_edge_length
        ev = h if self.eps_v is None else float(self.eps_v)
        ep = h if self.eps_p is None else float(self.eps_p)
        if not (ev > 0 and ep > 0):
            raise ValueError("finite-difference steps must be positive")
        return ev, ep


@dataclass
class JacobianBatch:
    J_v: np.ndarray          # (N,2,2)
    J_p: np.ndarray          # (N,2,2)
    in_v_basis: np.ndarray   # (N,3,2) orthonormal (v_par, v_perp)
    in_p_basis: np.ndarray   # (N,3,2)
    in_p_pinv: np.ndarray    # (N,2,3)
    out_basis: np.ndarray    # (N,3,2)
    out_pinv: np.ndarray     # (N,2,3)
    end_face: np.ndarray
    end_bary: np.ndarray
    end_dir: np.ndarray
    rotation: np.ndarray     # (N,3,3) transport Q
    status: np.ndarray       # base trace status
    degraded: np.ndarray     # (N,4) one-sided fallback used per column
    failed: np.ndarray       # (N,4) column could not be evaluated

    def __len__(self):
        return len(self.J_v)

    def pair(self, m: Mesh, i: int, p: SurfacePoint, v) -> JacobianPair:
        end = SurfacePoint(int(self.end_face[i]), tuple(self.end_bary[i]))
        return JacobianPair(
            J_v=self.J_v[i].copy(), J_p=self.J_p[i].copy(),
            frame_in_v=TangentFrame.from_vector(m, p, v),
            frame_in_p=BaryFrame.at(m, p), frame_out=BaryFrame.at(m, end),
            transport=self.rotation[i].copy(), degraded=tuple(bool(x) for x in self.degraded[i]),
        )

    def pullback_ambient(self, g_ambient: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ambient end gradients (N,3) to ambient gradients w.r.t. v and p."""
        g2 = np.einsum("nij,ni->nj", self.out_basis, g_ambient)
        gv = np.einsum("nij,ni->nj", self.J_v, g2)
        gp = np.einsum("nij,ni->nj", self.J_p, g2)
        return (np.einsum("nij,nj->ni", self.in_v_basis, gv),
                np.einsum("nji,nj->ni", self.in_p_pinv, gp))


def _project(Po, D):
    """(N,2,3) x (N,k,3) -> (N,2,k) with a fixed summation order."""
    return (Po[:, :, None, 0] * D[:, None, :, 0] + Po[:, :, None, 1] * D[:, None, :, 1]
            + Po[:, :, None, 2] * D[:, None, :, 2])


def _frames_at_start(m, faces, vecs):
    n = m.face_normals[faces]
    v = vecs - np.sum(vecs * n, axis=1, keepdims=True) * n
    L = np.linalg.norm(v, axis=1)
    if np.any(L < 1e-12):
        raise DegenerateDirection("|v| < 1e-12 in GFD input")
    e_par = v / L[:, None]
    e_perp = np.cross(n, e_par)
    Bp, Pp = bary_basis(m, faces)
    return v, e_par, e_perp, Bp, Pp


def _escaped(status, base_status):
    return (status == TraceStatus.BOUNDARY) & (base_status != TraceStatus.BOUNDARY)


def _gfd_columns(m, faces, barys, v, e_par, e_perp, Bp, base, eps_v, eps_p, sign, cfg, workers):
    """Perturbed endpoints for columns (v_par, v_perp, p_u, p_v) of the selected samples.

    ``sign`` is +1 (forward difference) or -1 (backward difference).  Returns
    (N,4,3) endpoints and (N,4) escape flags.
    """
    n = len(faces)
    X0 = base.endpoints(m)
    pu = Bp[:, :, 0]
    pv = Bp[:, :, 1]
    if sign > 0:
        # round 1: perp retrace plus the two short start perturbations (payload v)
        f1 = np.concatenate([faces, faces, faces])
        b1 = np.concatenate([barys, barys, barys])
        v1 = np.concatenate([v + eps_v * e_perp, eps_p * pu, eps_p * pv])
        r1 = trace_batch(m, f1, b1, v1, cfg, workers=workers, payloads=np.concatenate([v, v, v]))
        # round 2: short continuation from p' and the two retraces from the moved starts
        f2 = np.concatenate([base.face, r1.face[n:2 * n], r1.face[2 * n:]])
        b2 = np.concatenate([base.bary, r1.bary[n:2 * n], r1.bary[2 * n:]])
        v2 = np.concatenate([eps_v * base.dir, r1.payload[n:2 * n], r1.payload[2 * n:]])
        r2 = trace_batch(m, f2, b2, v2, cfg, workers=workers)
        Y = np.stack([r2.endpoints(m)[:n], r1.endpoints(m)[:n],
                      r2.endpoints(m)[n:2 * n], r2.endpoints(m)[2 * n:]], axis=1)
        esc = np.stack([_escaped(r2.status[:n], base.status), _escaped(r1.status[:n], base.status),
                        _escaped(r1.status[n:2 * n], base.status) | _escaped(r2.status[n:2 * n], base.status),
                        _escaped(r1.status[2 * n:], base.status) | _escaped(r2.status[2 * n:], base.status)],
                       axis=1)
        return Y, esc, (X0, eps_v, eps_v, eps_p, eps_p)
    # backward differences: the parallel column needs a shortened full retrace
    f1 = np.concatenate([faces] * 4)
    b1 = np.concatenate([barys] * 4)
    v1 = np.concatenate([v - eps_v * e_par, v - eps_v * e_perp, -eps_p * pu, -eps_p * pv])
    r1 = trace_batch(m, f1, b1, v1, cfg, workers=workers, payloads=np.concatenate([v] * 4))
    f2 = np.concatenate([r1.face[2 * n:3 * n], r1.face[3 * n:]])
    b2 = np.concatenate([r1.bary[2 * n:3 * n], r1.bary[3 * n:]])
    v2 = np.concatenate([r1.payload[2 * n:3 * n], r1.payload[3 * n:]])
    r2 = trace_batch(m, f2, b2, v2, cfg, workers=workers)
    E1 = r1.endpoints(m)
    E2 = r2.endpoints(m)
    Y = np.stack([E1[:n], E1[n:2 * n], E2[:n], E2[n:]], axis=1)
    esc = np.stack([_escaped(r1.status[:n], base.status), _escaped(r1.status[n:2 * n], base.status),
                    _escaped(r1.status[2 * n:3 * n], base.status) | _escaped(r2.status[:n], base.status),
                    _escaped(r1.status[3 * n:], base.status) | _escaped(r2.status[n:], base.status)], axis=1)
    return Y, esc, (X0, -eps_v, -eps_v, -eps_p, -eps_p)


def gfd_batched(m: Mesh, faces, barys, vecs, cfg: GfdConfig | None = None,
                trace_cfg: TraceConfig | None = None, base=None, workers: int | None = None) -> JacobianBatch:
    """GFD Jacobians for a batch of (p, v), using two batched tracing rounds.

    ``base`` may carry the already computed forward traces (a TraceBatch);
    otherwise they are traced here.  Columns whose perturbed trace leaves the
    mesh while the base trace did not are recomputed with the opposite
    perturbation and flagged in ``degraded``.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1)
    barys = np.asarray(barys, dtype=np.float64).reshape(-1, 3)
    vecs = np.asarray(vecs, dtype=np.float64).reshape(-1, 3)
    cfg = cfg or GfdConfig()
    trace_cfg = trace_cfg or TraceConfig()
    eps_v, eps_p = cfg.resolve(m)
    v, e_par, e_perp, Bp, Pp = _frames_at_start(m, faces, vecs)
    if base is None:
        base = trace_batch(m, faces, barys, v, trace_cfg, workers=workers)
    Y, esc, (X0, *eps) = _gfd_columns(m, faces, barys, v, e_par, e_perp, Bp, base,
                                      eps_v, eps_p, +1, trace_cfg, workers)
    eps = np.broadcast_to(np.array(eps), (len(faces), 4)).copy()
    degraded = np.zeros_like(esc)
    failed = np.zeros_like(esc)
    rows = np.nonzero(esc.any(axis=1))[0]
    if len(rows):
        sub = type(base)(*(getattr(base, k)[rows] for k in
                           ("face", "bary", "dir", "length", "status", "rotation", "steps", "n_points")))
        Yb, escb, (_, *epsb) = _gfd_columns(m, faces[rows], barys[rows], v[rows], e_par[rows], e_perp[rows],
                                            Bp[rows], sub, eps_v, eps_p, -1, trace_cfg, workers)
        for j in range(4):
            use = esc[rows, j]
            r = rows[use]
            Y[r, j] = Yb[use, j]
            eps[r, j] = epsb[j]
            degraded[r, j] = True
            failed[r, j] = escb[use, j]
    D = (Y - X0[:, None, :]) / eps[:, :, None]  # (N,4,3)
    Bo, Po = bary_basis(m, base.face)
    C = _project(Po, D)
    C[np.repeat(failed[:, None, :], 2, axis=1)] = np.nan
    return JacobianBatch(
        J_v=C[:, :, :2].copy(), J_p=C[:, :, 2:].copy(),
        in_v_basis=np.stack([e_par, e_perp], axis=2), in_p_basis=Bp, in_p_pinv=Pp,
        out_basis=Bo, out_pinv=Po, end_face=base.face, end_bary=base.bary, end_dir=base.dir,
        rotation=base.rotation, status=base.status, degraded=degraded, failed=failed,
    )


def gfd_jacobians(m: Mesh, p: SurfacePoint, v, cfg: GfdConfig | None = None,
                  trace_cfg: TraceConfig | None = None) -> JacobianPair:
    """Single-sample GFD Jacobian pair; raises PerturbationEscaped if a column is lost."""
    jb = gfd_batched(m, [p.face], [p.bary], np.asarray(v, dtype=float)[None], cfg, trace_cfg, workers=1)
    if jb.failed.any():
        raise PerturbationEscaped("perturbed trace left the mesh in both directions")
    return jb.pair(m, 0, p, v)


# unbatched reference path: one trace call per perturbed geodesic

def _single(m, f, b, vec, cfg, payload=None):
    return trace_batch(m, [f], [b], np.asarray(vec)[None], cfg, workers=1,
                       payloads=None if payload is None else np.asarray(payload)[None])


def _unbatched_columns(m, p, v, tr, cfg, trace_cfg, which):
    eps_v, eps_p = cfg.resolve(m)
    vv, e_par, e_perp, Bp, _ = _frames_at_start(m, np.array([p.face]), np.asarray(v, dtype=float)[None])
    vv, e_par, e_perp, Bp = vv[0], e_par[0], e_perp[0], Bp[0]
    base = _single(m, p.face, p.bary, vv, trace_cfg)
    X0 = base.endpoints(m)[0]
    st0 = base.status[0]

    def run(j, sign):
        if j == 0 and sign > 0:
            r = _single(m, base.face[0], base.bary[0], eps_v * base.dir[0], trace_cfg)
            return r.endpoints(m)[0], _escaped(r.status, st0)[0], eps_v
        if j == 0:
            r = _single(m, p.face, p.bary, vv - eps_v * e_par, trace_cfg)
            return r.endpoints(m)[0], _escaped(r.status, st0)[0], -eps_v
        if j == 1:
            r = _single(m, p.face, p.bary, vv + sign * eps_v * e_perp, trace_cfg)
            return r.endpoints(m)[0], _escaped(r.status, st0)[0], sign * eps_v
        r1 = _single(m, p.face, p.bary, sign * eps_p * Bp[:, j - 2], trace_cfg, payload=vv)
        r2 = _single(m, r1.face[0], r1.bary[0], r1.payload[0], trace_cfg)
        esc = _escaped(r1.status, st0)[0] or _escaped(r2.status, st0)[0]
        return r2.endpoints(m)[0], esc, sign * eps_p

    cols = []
    for j in which:
        y, esc, e = run(j, +1)
        if esc:
            y, esc, e = run(j, -1)
            if esc:
                raise PerturbationEscaped(f"column {j} escaped in both directions")
        cols.append((y - X0) / e)
    _, Po = bary_basis(m, base.face[:1])
    return _project(Po, np.stack(cols)[None])[0]


def gfd_jacobian_v(m: Mesh, p: SurfacePoint, v, tr: GeodesicTrace | None = None,
                   cfg: GfdConfig | None = None, trace_cfg: TraceConfig | None = None) -> np.ndarray:
    """2x2 J_v from the (v_par, v_perp) frame at p to the barycentric frame at p'."""
    return _unbatched_columns(m, p, v, tr, cfg or GfdConfig(), trace_cfg or TraceConfig(), (0, 1))


def gfd_jacobian_p(m: Mesh, p: SurfacePoint, v, tr: GeodesicTrace | None = None,
                   cfg: GfdConfig | None = None, trace_cfg: TraceConfig | None = None) -> np.ndarray:
    """2x2 J_p from the barycentric frame at p to the barycentric frame at p'."""
    return _unbatched_columns(m, p, v, tr, cfg or GfdConfig(), trace_cfg or TraceConfig(), (2, 3))


def gfd_unbatched(m: Mesh, faces, barys, vecs, cfg: GfdConfig | None = None,
                  trace_cfg: TraceConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Reference loop of per-sample GFD calls; returns (J_v, J_p) stacks."""
    Jv, Jp = [], []
    for f, b, v in zip(faces, barys, vecs):
        p = SurfacePoint(int(f), tuple(b))
        Jv.append(gfd_jacobian_v(m, p, v, None, cfg, trace_cfg))
        Jp.append(gfd_jacobian_p(m, p, v, None, cfg, trace_cfg))
    return np.array(Jv), np.array(Jp)
