"""Measurements shared by the CLI and the acceptance tests: timing sweeps,
oracle comparisons, determinism checks and gradient checks."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .diff import GfdConfig, ep_backward, gfd_batched
from .mesh import Mesh, embed_many
from .oracles import (pi_exp, sphere_exp, sphere_jacobian_p_transported, sphere_jacobians,
                      torus_exp_batch)
from .sampling import sample_tangents
from .shapes import make_icosphere, make_torus
from .tracer import TraceStatus, trace_batch

BENCH_SCHEMA = "digeo.benchmark/1"


@dataclass
class BenchmarkRecord:
    mesh: str
    faces: int
    batch: int
    scheme: str
    median_s: float
    p25_s: float
    p75_s: float
    per_trace_s: float

    def __post_init__(self):
        if not (0 < self.p25_s <= self.median_s <= self.p75_s):
            raise ValueError("times must be positive and ordered")

    FIELDS = ("mesh", "faces", "batch", "scheme", "median_s", "p25_s", "p75_s", "per_trace_s")

    def row(self) -> dict:
        return asdict(self)


def _timed(fn, reps: int) -> np.ndarray:
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(max(time.perf_counter() - t0, 1e-9))
    return np.array(out)


def _record(mesh_id, m, batch, scheme, times, per):
    q25, q50, q75 = np.percentile(times, [25, 50, 75])
    return BenchmarkRecord(mesh_id, m.n_faces, batch, scheme, float(q50), float(q25), float(q75), float(q50 / per))


def time_trace_batch(m: Mesh, n: int, rng: np.random.Generator, reps: int = 5,
                     workers: int | None = None) -> np.ndarray:
    """Wall times of ``reps`` consecutive batch traces of ``n`` random samples."""
    f, b, v = sample_tangents(m, n, rng)
    trace_batch(m, f[:1], b[:1], v[:1], workers=workers)  # compile / warm caches
    return _timed(lambda: trace_batch(m, f, b, v, workers=workers), reps)


def time_pi(m: Mesh, n: int, rng: np.random.Generator, step_rel: float = 1e-3) -> float:
    """Mean seconds per projection-integration trace with step ``step_rel * |v|``."""
    f, b, v = sample_tangents(m, n, rng)
    from .mesh import SurfacePoint

    pts = [SurfacePoint(int(f[i]), tuple(b[i])) for i in range(n)]
    pi_exp(m, pts[0], v[0] * 1e-3, 1e-3)  # compile
    t0 = time.perf_counter()
    for p, vv in zip(pts, v):
        pi_exp(m, p, vv, step_rel * np.linalg.norm(vv))
    return (time.perf_counter() - t0) / n


def benchmark(subdivs=(3, 4, 5, 6, 7), batches=(100, 1000, 10000, 100000), reps: int = 5,
              rng: np.random.Generator | None = None, workers: int | None = None,
              pi_samples: int = 0, on_error=None) -> list[BenchmarkRecord]:
    """Batch-size and face-count sweep.  Errors are passed to ``on_error`` and the sweep goes on."""
    rng = rng or np.random.default_rng(0)
    recs = []
    for k in subdivs:
        m = make_icosphere(k)
        mid = f"icosphere{k}"
        for n in batches:
            try:
                t = time_trace_batch(m, n, rng, reps, workers)
                recs.append(_record(mid, m, n, "straightest", t, n))
            except Exception as e:  # noqa: BLE001 - surfaced per run
                if on_error is None:
                    raise
                on_error({"mesh": mid, "batch": n, "error": type(e).__name__, "message": str(e)})
        if pi_samples:
            try:
                per = time_pi(m, pi_samples, rng)
                recs.append(BenchmarkRecord(mid, m.n_faces, pi_samples, "pi", per * pi_samples,
                                            per * pi_samples, per * pi_samples, per))
            except Exception as e:  # noqa: BLE001
                if on_error is None:
                    raise
                on_error({"mesh": mid, "scheme": "pi", "error": type(e).__name__, "message": str(e)})
    return recs


def linear_fit_r2(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    ss_res = np.sum((y - A @ coef) ** 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else 1.0


# ---------------------------------------------------------------------------
# oracle comparisons
# ---------------------------------------------------------------------------

def _on_sphere(X, V):
    """Project mesh start points to the unit sphere and their vectors to its tangent plane, keeping |v|."""
    P = X / np.linalg.norm(X, axis=1, keepdims=True)
    W = V - np.sum(V * P, axis=1, keepdims=True) * P
    W *= (np.linalg.norm(V, axis=1) / np.linalg.norm(W, axis=1))[:, None]
    return P, W


def sphere_errors(m: Mesh, n: int, rng: np.random.Generator, workers: int | None = None) -> np.ndarray:
    """Ambient distances between traced and closed-form sphere endpoints for ``n`` samples."""
    f, b, v = sample_tangents(m, n, rng)
    res = trace_batch(m, f, b, v, workers=workers)
    P, W = _on_sphere(embed_many(m, f, b), v)
    ref = np.array([sphere_exp(p, w) for p, w in zip(P, W)])
    return np.linalg.norm(res.endpoints(m) - ref, axis=1)


def torus_errors(m: Mesh, n: int, rng: np.random.Generator, R: float = 2.0, r: float = 1.0,
                 workers: int | None = None) -> np.ndarray:
    """Ambient distances between traced and RK4 torus endpoints."""
    f, b, v = sample_tangents(m, n, rng)
    res = trace_batch(m, f, b, v, workers=workers)
    ref = torus_exp_batch(embed_many(m, f, b), v, R, r)
    return np.linalg.norm(res.endpoints(m) - ref, axis=1)


def pi_errors(m: Mesh, n: int, rng: np.random.Generator, step_rel: float = 1e-3):
    """(PI vs closed form, PI vs straightest) endpoint distances on a unit-sphere mesh."""
    from .mesh import SurfacePoint

    f, b, v = sample_tangents(m, n, rng)
    res = trace_batch(m, f, b, v)
    P, W = _on_sphere(embed_many(m, f, b), v)
    e_ref, e_st = [], []
    for i in range(n):
        q = pi_exp(m, SurfacePoint(int(f[i]), tuple(b[i])), v[i], step_rel * np.linalg.norm(v[i]))
        y = m.embed(q)
        e_ref.append(np.linalg.norm(y - sphere_exp(P[i], W[i])))
        e_st.append(np.linalg.norm(y - res.endpoints(m)[i]))
    return np.array(e_ref), np.array(e_st)


def determinism_deviation(m: Mesh, n: int, rng: np.random.Generator, workers: int | None = None) -> float:
    """Max absolute deviation between a 1-worker and a many-worker batch (0.0 when bit-identical)."""
    import os

    f, b, v = sample_tangents(m, n, rng)
    seq = trace_batch(m, f, b, v, workers=1)
    par = trace_batch(m, f, b, v, workers=workers or max(2, os.cpu_count() or 1))
    if not seq.same_as(par):
        dev = max(float(np.max(np.abs(getattr(seq, k) - getattr(par, k))))
                  for k in ("bary", "dir", "length", "rotation"))
        return dev if dev > 0 else float("inf")  # structural mismatch
    return 0.0


def oracle_compare(n: int = 1000, subdivs=(5, 6), torus=((128, 64), (256, 128)),
                   rng: np.random.Generator | None = None, workers: int | None = None,
                   pi_samples: int = 0) -> dict:
    rng = rng or np.random.default_rng(0)
    rep = {"schema": "digeo.oracle/1", "samples": n, "sphere": [], "torus": []}
    for k in subdivs:
        m = make_icosphere(k)
        e = sphere_errors(m, n, rng, workers)
        row = {"subdiv": k, "faces": m.n_faces, "mean_error": float(e.mean())}
        if pi_samples:
            e_ref, _ = pi_errors(m, pi_samples, rng)
            row["pi_mean_error"] = float(e_ref.mean())
        rep["sphere"].append(row)
    for na, nb in torus:
        m = make_torus(2.0, 1.0, na, nb)
        e = torus_errors(m, n, rng, workers=workers)
        rep["torus"].append({"n_alpha": na, "n_beta": nb, "faces": m.n_faces, "mean_error": float(e.mean())})
    m = make_icosphere(subdivs[0])
    rep["parallel_max_deviation"] = determinism_deviation(m, n, rng, workers)
    return rep


# ---------------------------------------------------------------------------
# gradient checks on the sphere
# ---------------------------------------------------------------------------

def _cos(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return np.sum(a * b, axis=1) / np.maximum(na * nb, 1e-300)


def gradcheck(m: Mesh, n: int, rng: np.random.Generator, scheme: str = "gfd",
              gfd: GfdConfig | None = None, workers: int | None = None) -> dict:
    """Compare mesh gradients of ``|Exp_p(v) - q|^2`` with the sphere closed forms.

    ``q`` is uniform on the unit sphere.  Only samples whose trace reached
    its full length are scored.  Returns per-sample arrays and medians.
    """
    if scheme not in ("gfd", "ep"):
        raise ValueError("scheme must be 'gfd' or 'ep'")
    f, b, v = sample_tangents(m, n, rng)
    q = rng.normal(size=(n, 3))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    base = trace_batch(m, f, b, v, workers=workers)
    Y = base.endpoints(m)
    g_end = 2.0 * (Y - q)
    if scheme == "gfd":
        jb = gfd_batched(m, f, b, v, gfd, base=base, workers=workers)
        gv, gp = jb.pullback_ambient(g_end)
        ok = (base.status == TraceStatus.LENGTH_REACHED) & ~jb.failed.any(axis=1)
    else:
        gv = ep_backward(m, f, b, v, base.face, base.dir, g_end)
        gp = np.zeros_like(gv)
        ok = base.status == TraceStatus.LENGTH_REACHED
    P, W = _on_sphere(embed_many(m, f, b), v)
    tv = np.empty((n, 3))
    tp = np.empty((n, 3))
    for i in range(n):
        gs = 2.0 * (sphere_exp(P[i], W[i]) - q[i])
        _, Jv = sphere_jacobians(P[i], W[i])
        Pr = np.eye(3) - np.outer(P[i], P[i])
        tv[i] = Pr @ Jv.T @ gs
        tp[i] = sphere_jacobian_p_transported(P[i], W[i]).T @ gs
    cv = _cos(gv, tv)[ok]
    rv = (np.linalg.norm(gv, axis=1) / np.linalg.norm(tv, axis=1))[ok]
    out = {
        "schema": "digeo.gradcheck/1", "scheme": scheme, "samples": int(n), "scored": int(ok.sum()),
        "median_cos_v": float(np.median(cv)), "median_norm_ratio_v": float(np.median(rv)),
        "cos_v": cv, "norm_ratio_v": rv, "grad_p": gp[ok],
    }
    if scheme == "gfd":
        cp = _cos(gp, tp)[ok]
        out["cos_p"] = cp
        out["median_cos_p"] = float(np.median(cp))
    else:
        out["max_abs_grad_p"] = float(np.max(np.abs(gp))) if len(gp) else 0.0
    return out


def backward_times(m: Mesh, n: int, rng: np.random.Generator, reps: int = 3,
                   workers: int | None = None, forward: bool = True) -> tuple[float, float]:
    """Median (GFD, EP) seconds on ``n`` samples.

    With ``forward`` each timing covers the forward trace plus the backward
    pass (the GFD batch re-traces ``Exp(p, v)`` alongside its perturbations);
    without it only the backward pass is timed, given a stored forward result.
    """
    f, b, v = sample_tangents(m, n, rng)
    g = rng.normal(size=(n, 3))
    stored = trace_batch(m, f, b, v, workers=workers)

    def base():
        return trace_batch(m, f, b, v, workers=workers) if forward else stored

    def run_ep():
        r = base()
        ep_backward(m, f, b, v, r.face, r.dir, g)

    def run_gfd():
        gfd_batched(m, f, b, v, base=base(), workers=workers).pullback_ambient(g)

    run_ep()
    run_gfd()
    return float(np.median(_timed(run_gfd, reps))), float(np.median(_timed(run_ep, reps)))

