"""Ground truths for testing the tracer: closed-form sphere geodesics, an RK4
torus geodesic integrator, and the projection-integration (PI) baseline.

The mesh generators used as fixtures live in :mod:`digeo.shapes` and are
re-exported here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import _kernels as K
from .errors import DegenerateDirection, MaxIterations, NotOnSphere, NotTangent, StepTooLarge
from .mesh import Mesh, SurfacePoint, embed
from .shapes import make_cone, make_cylinder, make_icosphere, make_plane, make_torus, torus_point  # noqa: F401


# ---------------------------------------------------------------------------
# sphere
# ---------------------------------------------------------------------------

def _check_sphere(p, v):
    p = np.asarray(p, dtype=float)
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(p) - 1.0) > 1e-10:
        raise NotOnSphere(f"|p| = {np.linalg.norm(p)!r}")
    if abs(p @ v) > 1e-10 * max(1.0, np.linalg.norm(v)):
        raise NotTangent(f"p.v = {p @ v!r}")
    return p, v


def sphere_exp(p, v) -> np.ndarray:
    """Unit-sphere exponential map ``cos|v| p + sin|v| v/|v|``."""
    p, v = _check_sphere(p, v)
    n = np.linalg.norm(v)
    if n < 1e-12:
        return p.copy()
    out = math.cos(n) * p + math.sin(n) * v / n
    return out / np.linalg.norm(out)


def sphere_jacobians(p, v) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ambient Jacobians (J_p, J_v) of the sphere exponential map.

    ``J_p = cos|v| I`` treats ``v`` as fixed while ``p`` moves; ``J_v`` is the
    derivative of ``cos|v| p + sin|v| v/|v|`` with respect to ambient ``v``.
    """
    p, v = _check_sphere(p, v)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateDirection("|v| too small")
    I = np.eye(3)
    vv = np.outer(v, v)
    Jv = ((I - np.outer(p, v)) / n - vv / n**3) * math.sin(n) + vv / n**2 * math.cos(n)
    Jp = math.cos(n) * I
    return Jp, Jv


def sphere_jacobian_p_transported(p, v) -> np.ndarray:
    """Derivative of the endpoint when ``p`` moves and ``v`` is parallel transported with it.

    For a tangent displacement u the endpoint moves by
    ``cos|v| u - (u . v_hat) sin|v| p`` (Jacobi fields on the unit sphere).
    The matrix acts on ambient vectors after projection to the tangent plane.
    """
    p, v = _check_sphere(p, v)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateDirection("|v| too small")
    vh = v / n
    P = np.eye(3) - np.outer(p, p)
    return (math.cos(n) * np.eye(3) - math.sin(n) * np.outer(p, vh)) @ P


def sphere_transport(p, v, w) -> np.ndarray:
    """Parallel transport of tangent ``w`` along the great circle Exp_p(tv), t in [0,1]."""
    p, v = _check_sphere(p, v)
    n = np.linalg.norm(v)
    w = np.asarray(w, dtype=float)
    if n < 1e-12:
        return w.copy()
    vh = v / n
    a = w @ vh
    # the component along the curve rotates with it, the normal one is constant
    return w - a * vh + a * (math.cos(n) * vh - math.sin(n) * p)


# ---------------------------------------------------------------------------
# torus
# ---------------------------------------------------------------------------

@dataclass
class TorusState:
    alpha: float
    beta: float
    alpha_dot: float
    beta_dot: float
    R_major: float = 2.0
    r_minor: float = 1.0

    def __post_init__(self):
        if not self.R_major > self.r_minor > 0:
            raise ValueError("need R_major > r_minor > 0")

    def position(self) -> np.ndarray:
        return torus_point(self.alpha, self.beta, self.R_major, self.r_minor)

    def speed(self) -> float:
        rho = self.R_major + self.r_minor * math.cos(self.beta)
        return math.sqrt((rho * self.alpha_dot) ** 2 + (self.r_minor * self.beta_dot) ** 2)

    @classmethod
    def from_ambient(cls, x, v, R: float, r: float) -> "TorusState":
        """Initial conditions from an ambient point (projected onto the torus) and velocity."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        a = math.atan2(x[1], x[0])
        b = math.atan2(x[2], math.hypot(x[0], x[1]) - R)
        rho = R + r * math.cos(b)
        Fa = np.array([-rho * math.sin(a), rho * math.cos(a), 0.0])
        Fb = np.array([-r * math.sin(b) * math.cos(a), -r * math.sin(b) * math.sin(a), r * math.cos(b)])
        return cls(a, b, float(v @ Fa) / rho**2, float(v @ Fb) / r**2, R, r)


def _torus_rhs(y, R, r):
    a, b, da, db = y
    sb, cb = math.sin(b), math.cos(b)
    rho = R + r * cb
    return np.array([da, db, 2.0 * r * sb / rho * da * db, -rho * sb / r * da * da])


def torus_exp(state0: TorusState, length: float, step: float | None = None,
              tol: float = 1e-6) -> tuple[TorusState, np.ndarray]:
    """Integrate the torus geodesic equations with fixed-step RK4.

    The initial velocity is rescaled to unit metric speed so that the curve
    parameter is arc length; integration runs up to ``length``.  Raises
    StepTooLarge when the metric speed drifts by more than ``tol`` (relative).
    """
    R, r = state0.R_major, state0.r_minor
    sp = state0.speed()
    if length <= 0 or sp == 0.0:
        return state0, state0.position()
    y = np.array([state0.alpha, state0.beta, state0.alpha_dot / sp, state0.beta_dot / sp])
    if step is None:
        step = length / 2048
    n = max(1, int(math.ceil(length / step - 1e-12)))
    h = length / n
    for _ in range(n):
        k1 = _torus_rhs(y, R, r)
        k2 = _torus_rhs(y + 0.5 * h * k1, R, r)
        k3 = _torus_rhs(y + 0.5 * h * k2, R, r)
        k4 = _torus_rhs(y + h * k3, R, r)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out = TorusState(float(y[0]), float(y[1]), float(y[2]), float(y[3]), R, r)
    if abs(out.speed() - 1.0) > tol:
        raise StepTooLarge(f"metric speed drifted to {out.speed()!r}")
    return out, out.position()


def torus_exp_ambient(x, v, R: float, r: float, step: float | None = None) -> np.ndarray:
    """Endpoint of the torus geodesic from ambient ``x`` with velocity ``v`` (length |v|)."""
    st = TorusState.from_ambient(x, v, R, r)
    return torus_exp(st, float(np.linalg.norm(v)), step)[1]


@njit(cache=True)
def _torus_rk4_batch(y0, lengths, n_steps, R, r):
    out = np.empty_like(y0)
    k = np.empty((4, 4))
    for i in range(y0.shape[0]):
        y = y0[i].copy()
        h = lengths[i] / n_steps
        for _ in range(n_steps):
            for j in range(4):
                if j == 0:
                    z = y
                elif j == 3:
                    z = y + h * k[2]
                else:
                    z = y + 0.5 * h * k[j - 1]
                sb = math.sin(z[1])
                rho = R + r * math.cos(z[1])
                k[j, 0] = z[2]
                k[j, 1] = z[3]
                k[j, 2] = 2.0 * r * sb / rho * z[2] * z[3]
                k[j, 3] = -rho * sb / r * z[2] * z[2]
            y = y + h / 6.0 * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3])
        out[i] = y
    return out


def torus_exp_batch(X: np.ndarray, V: np.ndarray, R: float, r: float, n_steps: int = 2048) -> np.ndarray:
    """Vectorized :func:`torus_exp_ambient` for (n,3) points and velocities."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    V = np.asarray(V, dtype=float).reshape(-1, 3)
    y0 = np.empty((len(X), 4))
    L = np.linalg.norm(V, axis=1)
    for i in range(len(X)):
        st = TorusState.from_ambient(X[i], V[i], R, r)
        sp = st.speed()
        y0[i] = (st.alpha, st.beta, st.alpha_dot / sp if sp else 0.0, st.beta_dot / sp if sp else 0.0)
    y = _torus_rk4_batch(y0, L, int(n_steps), float(R), float(r))
    rho = R + r * np.cos(y[:, 1])
    return np.stack([rho * np.cos(y[:, 0]), rho * np.sin(y[:, 0]), r * np.sin(y[:, 1])], axis=1)


# ---------------------------------------------------------------------------
# projection integration
# ---------------------------------------------------------------------------

def pi_exp(m: Mesh, p: SurfacePoint, v, s: float, max_iter: int | None = None) -> SurfacePoint:
    """Projection-integration exp map with Euclidean step ``s``.

    Each iteration steps ``s`` along the current direction, projects onto the
    closest face (brute force over all faces) and rotates the direction by
    the change of face normal.  The last step is shortened to the remaining
    length.
    """
    if not s > 0:
        raise ValueError("step must be positive")
    v = np.asarray(v, dtype=float)
    L = float(np.linalg.norm(v))
    if L == 0.0:
        return p
    if max_iter is None:
        max_iter = 4 * int(math.ceil(L / s)) + 10
    x = embed(p, m)
    f, pos, it, ok = K.pi_trace(m.vertices, m.faces, m.face_normals, x, p.face, v, L, s, max_iter)
    if not ok:
        raise MaxIterations(f"projection integration did not finish after {it} iterations")
    from .mesh import project_point

    return project_point(m, pos)[0]
