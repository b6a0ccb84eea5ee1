"""Compiled straightest-geodesic kernels.

Every function here takes the mesh as the flat tuple returned by
:meth:`digeo.mesh.Mesh.kernel_arrays` (indexed with the ``_X``.. constants)
and operates on a single geodesic.  Batch entry points loop over an index
range, so any partition of a batch over workers produces bit-identical
results.

A running 3x3 orthogonal matrix ``Q`` accumulates every rotation applied to
the travel direction (edge unfoldings, vertex re-orientations).  Applying
``Q`` to a tangent vector at the start gives its parallel transport to the
current point, and ``Q.T`` transports back.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .mesh import closest_point_bruteforce

# mesh tuple layout
_X, _F, _ADJ, _ADJK, _N, _PINV = 0, 1, 2, 3, 4, 5
_CFAN, _CPOS, _FPTR, _FFACE, _FCORNER, _FSV, _FEV, _FOFF, _CANG, _FTOT, _FCLOSED = range(6, 17)
_VFPTR, _VFANS = 17, 18

TAU = 1e-10

LENGTH_REACHED = 0
BOUNDARY = 1
MAX_STEPS = 2
STALL = 3
BAD_INPUT = 4

# return codes of boundary handling
_RESUMED = 0
_SLIDING = 1
_STUCK = 2


@njit(cache=True, nogil=True, inline="always")
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True, nogil=True)
def _cross(a, b, out):
    x = a[1] * b[2] - a[2] * b[1]
    y = a[2] * b[0] - a[0] * b[2]
    z = a[0] * b[1] - a[1] * b[0]
    out[0] = x
    out[1] = y
    out[2] = z


@njit(cache=True, nogil=True)
def _normalize(a):
    n = math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
    if n > 0.0:
        a[0] /= n
        a[1] /= n
        a[2] /= n
    return n


@njit(cache=True, nogil=True)
def _local(F, f, v):
    for j in range(3):
        if F[f, j] == v:
            return j
    return -1


@njit(cache=True, nogil=True)
def bary_dir(M, f, d):
    """Barycentric velocity of ambient direction ``d`` in face ``f`` (sums to 0)."""
    P = M[_PINV]
    bv1 = P[f, 0, 0] * d[0] + P[f, 0, 1] * d[1] + P[f, 0, 2] * d[2]
    bv2 = P[f, 1, 0] * d[0] + P[f, 1, 1] * d[1] + P[f, 1, 2] * d[2]
    return -bv1 - bv2, bv1, bv2


@njit(cache=True, nogil=True)
def project_to_face(M, f, d):
    """Remove the normal component of ``d`` w.r.t. face ``f``; returns the new norm."""
    n = M[_N][f]
    s = _dot(d, n)
    d[0] -= s * n[0]
    d[1] -= s * n[1]
    d[2] -= s * n[2]
    return math.sqrt(_dot(d, d))


@njit(cache=True, nogil=True)
def _apply_rotation(R, d, Q):
    """d <- R d and Q <- R Q."""
    t0 = R[0, 0] * d[0] + R[0, 1] * d[1] + R[0, 2] * d[2]
    t1 = R[1, 0] * d[0] + R[1, 1] * d[1] + R[1, 2] * d[2]
    t2 = R[2, 0] * d[0] + R[2, 1] * d[1] + R[2, 2] * d[2]
    d[0] = t0
    d[1] = t1
    d[2] = t2
    tmp = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            tmp[i, j] = R[i, 0] * Q[0, j] + R[i, 1] * Q[1, j] + R[i, 2] * Q[2, j]
    for i in range(3):
        for j in range(3):
            Q[i, j] = tmp[i, j]


@njit(cache=True, nogil=True)
def _frame_rotation(a0, a1, a2, b0, b1, b2, R):
    """Rotation taking orthonormal frame (a0, a1, a2) onto (b0, b1, b2)."""
    for i in range(3):
        for j in range(3):
            R[i, j] = b0[i] * a0[j] + b1[i] * a1[j] + b2[i] * a2[j]


@njit(cache=True, nogil=True)
def _align_rotation(a, b, R):
    """Minimal rotation taking unit vector a onto unit vector b (Rodrigues)."""
    c = _dot(a, b)
    ax = np.empty(3)
    _cross(a, b, ax)
    s = math.sqrt(_dot(ax, ax))
    for i in range(3):
        for j in range(3):
            R[i, j] = 1.0 if i == j else 0.0
    if s < 1e-15:
        if c > 0.0:
            return
        # antiparallel: rotate by pi about any axis orthogonal to a
        t = np.zeros(3)
        i0 = 0
        if abs(a[1]) < abs(a[i0]):
            i0 = 1
        if abs(a[2]) < abs(a[i0]):
            i0 = 2
        t[i0] = 1.0
        _cross(a, t, ax)
        _normalize(ax)
        for i in range(3):
            for j in range(3):
                R[i, j] = 2.0 * ax[i] * ax[j] - (1.0 if i == j else 0.0)
        return
    k0 = ax[0] / s
    k1 = ax[1] / s
    k2 = ax[2] / s
    K = np.array([[0.0, -k2, k1], [k2, 0.0, -k0], [-k1, k0, 0.0]])
    K2 = K @ K
    for i in range(3):
        for j in range(3):
            R[i, j] += s * K[i, j] + (1.0 - c) * K2[i, j]


# ---------------------------------------------------------------------------
# single-step primitives
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def cross_edge(M, f, k, b, d, Q):
    """Move the point on edge ``k`` of face ``f`` into the adjacent face.

    ``b`` and ``d`` are rewritten in the adjacent face; ``d`` (and ``Q``) are
    rotated about the shared edge so that the two faces are unfolded flat.
    Returns the new face index, or -1 if the edge is on the boundary.
    """
    V = M[_X]
    F = M[_F]
    g = M[_ADJ][f, k]
    if g < 0:
        return -1
    kg = M[_ADJK][f, k]
    a = F[f, (k + 1) % 3]
    c = F[f, (k + 2) % 3]
    ja = _local(F, g, a)
    jc = _local(F, g, c)
    ba = b[(k + 1) % 3]
    bc = b[(k + 2) % 3]
    s = ba + bc
    b[0] = 0.0
    b[1] = 0.0
    b[2] = 0.0
    b[ja] = ba / s
    b[jc] = bc / s

    e = V[c] - V[a]
    _normalize(e)
    t = V[F[f, k]] - V[a]
    te = _dot(t, e)
    u = np.empty(3)  # leaving direction of f across the edge
    for i in range(3):
        u[i] = -(t[i] - te * e[i])
    _normalize(u)
    t2 = V[F[g, kg]] - V[a]
    te2 = _dot(t2, e)
    w = np.empty(3)  # entering direction of g
    for i in range(3):
        w[i] = t2[i] - te2 * e[i]
    _normalize(w)
    eu = np.empty(3)
    ew = np.empty(3)
    _cross(e, u, eu)
    _cross(e, w, ew)
    R = np.empty((3, 3))
    _frame_rotation(e, u, eu, e, w, ew, R)
    _apply_rotation(R, d, Q)
    project_to_face(M, g, d)
    _normalize(d)
    return g


@njit(cache=True, nogil=True)
def _fan_face_frame(M, idx, x, es, n):
    """Unit start-edge direction and fan-oriented normal of fan entry ``idx``."""
    V = M[_X]
    sv = M[_FSV][idx]
    ev = M[_FEV][idx]
    for i in range(3):
        es[i] = V[sv, i] - V[x, i]
    ee = V[ev] - V[x]
    _cross(es, ee, n)
    _normalize(n)
    _normalize(es)


@njit(cache=True, nogil=True)
def _fan_angle_of(M, idx, x, vec):
    """Signed angle of ``vec`` from the start edge of fan entry ``idx``."""
    es = np.empty(3)
    n = np.empty(3)
    _fan_face_frame(M, idx, x, es, n)
    c = np.empty(3)
    _cross(es, vec, c)
    return math.atan2(_dot(c, n), _dot(es, vec))


@njit(cache=True, nogil=True)
def _fan_direction(M, p0, cnt, x, phi, d_in, n_in, b, d, Q):
    """Place direction at fan angle ``phi`` (within [0, total)); returns the face."""
    F = M[_F]
    FF = M[_FFACE]
    FC = M[_FCORNER]
    m = cnt - 1
    for i in range(cnt):
        idx = p0 + i
        hi = M[_FOFF][idx] + M[_CANG][FF[idx], FC[idx]]
        if phi < hi:
            m = i
            break
    idx = p0 + m
    g = FF[idx]
    kg = FC[idx]
    es = np.empty(3)
    n2 = np.empty(3)
    _fan_face_frame(M, idx, x, es, n2)
    loc = phi - M[_FOFF][idx]
    if loc < 0.0:
        loc = 0.0
    t = np.empty(3)
    _cross(n2, es, t)
    d_out = np.empty(3)
    cl = math.cos(loc)
    sl = math.sin(loc)
    for i in range(3):
        d_out[i] = cl * es[i] + sl * t[i]
    # rotation from (d_in, n_in x d_in, n_in) onto (d_out, n2 x d_out, n2)
    a1 = np.empty(3)
    b1 = np.empty(3)
    _cross(n_in, d_in, a1)
    _cross(n2, d_out, b1)
    R = np.empty((3, 3))
    _frame_rotation(d_in, a1, n_in, d_out, b1, n2, R)
    tmp = np.empty(3)
    tmp[:] = d
    _apply_rotation(R, tmp, Q)
    for i in range(3):
        d[i] = d_out[i]
    b[0] = 0.0
    b[1] = 0.0
    b[2] = 0.0
    b[kg] = 1.0
    return g


@njit(cache=True, nogil=True)
def cross_vertex(M, f, k, b, d, Q):
    """Continue a geodesic arriving at vertex ``k`` of face ``f`` along direction ``d``.

    The outgoing direction leaves half of the fan's total angle on each side
    of the curve.  Returns the exit face or -1 if the vertex is on the boundary.
    """
    fan = M[_CFAN][f, k]
    if not M[_FCLOSED][fan]:
        return -1
    x = M[_F][f, k]
    p0 = M[_FPTR][fan]
    cnt = M[_FPTR][fan + 1] - p0
    idx = p0 + M[_CPOS][f, k]
    es = np.empty(3)
    n_in = np.empty(3)
    _fan_face_frame(M, idx, x, es, n_in)
    d_in = np.empty(3)
    s = _dot(d, n_in)
    for i in range(3):
        d_in[i] = d[i] - s * n_in[i]
    _normalize(d_in)
    back = -d_in
    c = np.empty(3)
    _cross(es, back, c)
    phi = math.atan2(_dot(c, n_in), _dot(es, back))
    ang = M[_CANG][f, k]
    if phi < 0.0:
        phi = 0.0
    elif phi > ang:
        phi = ang
    theta = M[_FTOT][fan]
    phi_out = M[_FOFF][idx] + phi + 0.5 * theta
    if phi_out >= theta:
        phi_out -= theta
    return _fan_direction(M, p0, cnt, x, phi_out, d_in, n_in, b, d, Q)


@njit(cache=True, nogil=True)
def orient_at_vertex(M, f, k, b, d, Q):
    """Re-anchor a direction given at a vertex so that it points into its face.

    The direction's angle is measured from the start edge of ``f`` inside the
    fan; if it falls outside ``f`` the fan is walked (wrapping around for
    interior vertices).  Returns the face, or -1 if it points off an open fan.
    """
    fan = M[_CFAN][f, k]
    x = M[_F][f, k]
    p0 = M[_FPTR][fan]
    cnt = M[_FPTR][fan + 1] - p0
    idx = p0 + M[_CPOS][f, k]
    es = np.empty(3)
    n_in = np.empty(3)
    _fan_face_frame(M, idx, x, es, n_in)
    d_in = np.empty(3)
    s = _dot(d, n_in)
    for i in range(3):
        d_in[i] = d[i] - s * n_in[i]
    _normalize(d_in)
    c = np.empty(3)
    _cross(es, d_in, c)
    phi = math.atan2(_dot(c, n_in), _dot(es, d_in))
    ang = M[_CANG][f, k]
    if -1e-12 <= phi <= ang + 1e-12:
        phi = min(max(phi, 0.0), ang)
    theta = M[_FTOT][fan]
    phi_abs = M[_FOFF][idx] + phi
    if M[_FCLOSED][fan]:
        phi_abs = phi_abs % theta
    elif phi_abs < 0.0 or phi_abs > theta:
        return -1
    return _fan_direction(M, p0, cnt, x, phi_abs, d_in, n_in, b, d, Q)


@njit(cache=True, nogil=True)
def _align_normals(M, f_from, f_to, d, Q):
    """Rotate (d, Q) with the minimal rotation between the two face planes."""
    n0 = M[_N][f_from].copy()
    n1 = M[_N][f_to]
    if _dot(n0, n1) < 0.0:
        n0 = -n0
    R = np.empty((3, 3))
    _align_rotation(n0, n1, R)
    _apply_rotation(R, d, Q)


@njit(cache=True, nogil=True)
def boundary_vertex_step(M, x, f, b, d, saved, Q, prev_vertex, out):
    """Hole-avoidance handling at boundary vertex ``x``.

    Picks the incident face whose plane is closest to the saved direction and
    into which the projected direction points; otherwise slides along the
    boundary edge best aligned with the saved direction.  Writes the new face
    into ``out[0]`` and returns _RESUMED, _SLIDING or _STUCK.
    """
    V = M[_X]
    F = M[_F]
    N = M[_N]
    sn = math.sqrt(_dot(saved, saved))
    best = np.inf
    best_g = -1
    best_k = -1
    best_dir = np.zeros(3)
    pu = np.empty(3)
    for fi in range(M[_VFPTR][x], M[_VFPTR][x + 1]):
        fan = M[_VFANS][fi]
        for idx in range(M[_FPTR][fan], M[_FPTR][fan + 1]):
            g = M[_FFACE][idx]
            kg = M[_FCORNER][idx]
            s = _dot(saved, N[g])
            for i in range(3):
                pu[i] = saved[i] - s * N[g, i]
            pn = _normalize(pu)
            if pn <= 1e-14 * sn:
                continue
            bv0, bv1, bv2 = bary_dir(M, g, pu)
            ok = True
            scale = abs(bv0) + abs(bv1) + abs(bv2)
            if kg != 0 and bv0 < -1e-12 * scale:
                ok = False
            if kg != 1 and bv1 < -1e-12 * scale:
                ok = False
            if kg != 2 and bv2 < -1e-12 * scale:
                ok = False
            if not ok:
                continue
            err = math.acos(min(1.0, pn / sn))
            if err < best:
                best = err
                best_g = g
                best_k = kg
                best_dir[:] = pu
    if best_g >= 0:
        _align_normals(M, f, best_g, d, Q)
        d[:] = best_dir
        b[:] = 0.0
        b[best_k] = 1.0
        out[0] = best_g
        return _RESUMED
    # no face admits inward motion: slide along a boundary edge
    best_dot = -np.inf
    t = np.empty(3)
    for fi in range(M[_VFPTR][x], M[_VFPTR][x + 1]):
        fan = M[_VFANS][fi]
        if M[_FCLOSED][fan]:
            continue
        p0 = M[_FPTR][fan]
        p1 = M[_FPTR][fan + 1] - 1
        for which in range(2):
            idx = p0 if which == 0 else p1
            y = M[_FSV][idx] if which == 0 else M[_FEV][idx]
            if y == prev_vertex:
                continue
            for i in range(3):
                t[i] = V[y, i] - V[x, i]
            _normalize(t)
            dt = _dot(t, saved)
            if dt > best_dot:
                best_dot = dt
                best_g = M[_FFACE][idx]
                best_k = M[_FCORNER][idx]
                best_dir[:] = t
    if best_g < 0:
        return _STUCK
    _align_normals(M, f, best_g, d, Q)
    d[:] = best_dir
    b[:] = 0.0
    b[best_k] = 1.0
    out[0] = best_g
    return _SLIDING


# ---------------------------------------------------------------------------
# full trace
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _record(rec_face, rec_bary, rec_seg, npts, cap, f, b, seg):
    if npts < cap:
        rec_face[npts] = f
        rec_bary[npts, 0] = b[0]
        rec_bary[npts, 1] = b[1]
        rec_bary[npts, 2] = b[2]
        rec_seg[npts] = seg
    return npts + 1


@njit(cache=True, nogil=True)
def _clean_bary(b):
    for i in range(3):
        if b[i] < 0.0:
            b[i] = 0.0
    s = b[0] + b[1] + b[2]
    b[0] /= s
    b[1] /= s
    b[2] /= s


@njit(cache=True, nogil=True)
def trace_one(M, f, b, d, length, max_steps, hole_avoid, Q, rec_face, rec_bary, rec_seg, cap):
    """Trace one straightest geodesic of ``length`` from (f, b) along unit ``d``.

    ``b``, ``d`` and ``Q`` are updated in place.  Returns
    (face, traced_length, status, n_points, steps).
    """
    F = M[_F]
    V = M[_X]
    traced = 0.0
    steps = 0
    npts = _record(rec_face, rec_bary, rec_seg, 0, cap, f, b, 0.0)
    if not (length > 0.0):
        return f, 0.0, LENGTH_REACHED, npts, 0
    saved = d.copy()
    sliding = False
    prev_vertex = -1
    out = np.empty(1, np.int64)

    # initialise: make sure the direction points into the anchor face
    kmax = 0
    for i in range(1, 3):
        if b[i] > b[kmax]:
            kmax = i
    if b[kmax] >= 1.0 - TAU:
        b[:] = 0.0
        b[kmax] = 1.0
        g = orient_at_vertex(M, f, kmax, b, d, Q)
        if g < 0:
            if not hole_avoid:
                return f, 0.0, BOUNDARY, npts, 0
            saved[:] = d
            sliding = True
            code = boundary_vertex_step(M, F[f, kmax], f, b, d, saved, Q, -1, out)
            if code == _STUCK:
                return f, 0.0, BOUNDARY, npts, 0
            sliding = code == _SLIDING
            g = out[0]
        f = g
    else:
        kmin = 0
        for i in range(1, 3):
            if b[i] < b[kmin]:
                kmin = i
        if b[kmin] <= TAU:
            bv0, bv1, bv2 = bary_dir(M, f, d)
            bvk = bv0 if kmin == 0 else (bv1 if kmin == 1 else bv2)
            if bvk < -1e-12 * (abs(bv0) + abs(bv1) + abs(bv2)):
                b[kmin] = 0.0
                _clean_bary(b)
                g = cross_edge(M, f, kmin, b, d, Q)
                if g < 0:
                    if not hole_avoid:
                        return f, 0.0, BOUNDARY, npts, 0
                    # leave the tangent unchanged; handled by the main loop below
                    b[kmin] = 0.0
                else:
                    f = g

    status = LENGTH_REACHED
    while traced < length:
        if steps >= max_steps:
            status = MAX_STEPS
            break
        steps += 1
        bv0, bv1, bv2 = bary_dir(M, f, d)
        bv = (bv0, bv1, bv2)
        lam = np.inf
        imin = -1
        for i in range(3):
            if b[i] > TAU and bv[i] < 0.0:
                li = -b[i] / bv[i]
                if li < lam:
                    lam = li
                    imin = i
        if imin < 0:
            # at an edge point with the direction leaving the face through it
            kmin = 0
            for i in range(1, 3):
                if b[i] < b[kmin]:
                    kmin = i
            if hole_avoid and M[_ADJ][f, kmin] < 0:
                lam = 0.0
                imin = kmin
            else:
                status = STALL
                break
        rem = length - traced
        if rem <= lam:
            b[0] += rem * bv0
            b[1] += rem * bv1
            b[2] += rem * bv2
            _clean_bary(b)
            traced = length
            npts = _record(rec_face, rec_bary, rec_seg, npts, cap, f, b, rem)
            break
        if lam > 0.0:
            b[0] += lam * bv0
            b[1] += lam * bv1
            b[2] += lam * bv2
            b[imin] = 0.0
            _clean_bary(b)
            traced += lam
            npts = _record(rec_face, rec_bary, rec_seg, npts, cap, f, b, lam)
        n_zero = 0
        kmax = 0
        for i in range(3):
            if b[i] <= TAU:
                n_zero += 1
            if b[i] > b[kmax]:
                kmax = i
        if n_zero >= 2:
            # vertex
            b[:] = 0.0
            b[kmax] = 1.0
            x = F[f, kmax]
            g = cross_vertex(M, f, kmax, b, d, Q) if not sliding else -1
            if g >= 0:
                f = g
                continue
            if not hole_avoid:
                status = BOUNDARY
                break
            if not sliding:
                saved[:] = d
            code = boundary_vertex_step(M, x, f, b, d, saved, Q, prev_vertex, out)
            if code == _STUCK:
                status = BOUNDARY
                break
            sliding = code == _SLIDING
            prev_vertex = x
            f = out[0]
            continue
        # edge crossing
        g = cross_edge(M, f, imin, b, d, Q)
        if g >= 0:
            f = g
            continue
        if not hole_avoid:
            status = BOUNDARY
            break
        # boundary edge: move to the endpoint ahead along the edge
        if not sliding:
            saved[:] = d
        sliding = True
        a = (imin + 1) % 3
        c = (imin + 2) % 3
        p = b[a] * V[F[f, a]] + b[c] * V[F[f, c]] + b[imin] * V[F[f, imin]]
        ta = V[F[f, a]] - p
        tc = V[F[f, c]] - p
        if _dot(ta, saved) >= _dot(tc, saved):
            tgt, oth, tv = a, c, ta
        else:
            tgt, oth, tv = c, a, tc
        dist = math.sqrt(_dot(tv, tv))
        rem = length - traced
        if rem <= dist:
            t = rem / dist
            bt = b[tgt]
            bo = b[oth]
            b[tgt] = bt + t * (1.0 - bt)
            b[oth] = bo * (1.0 - t)
            b[imin] = 0.0
            _clean_bary(b)
            traced = length
            npts = _record(rec_face, rec_bary, rec_seg, npts, cap, f, b, rem)
            break
        b[:] = 0.0
        b[tgt] = 1.0
        traced += dist
        npts = _record(rec_face, rec_bary, rec_seg, npts, cap, f, b, dist)
        x = F[f, tgt]
        prev_vertex = F[f, oth]
        code = boundary_vertex_step(M, x, f, b, d, saved, Q, prev_vertex, out)
        if code == _STUCK:
            status = BOUNDARY
            break
        sliding = code == _SLIDING
        prev_vertex = x
        f = out[0]
    return f, traced, status, npts, steps


@njit(cache=True, nogil=True)
def trace_range(M, in_face, in_bary, in_vec, max_steps, hole_avoid, lo, hi,
                out_face, out_bary, out_dir, out_len, out_status, out_Q, out_steps, out_npts,
                rec_ptr, rec_face, rec_bary, rec_seg, record):
    """Trace requests ``lo..hi``; ``in_vec`` carries direction and length (its norm)."""
    dummy_f = np.empty(0, np.int64)
    dummy_b = np.empty((0, 3))
    dummy_s = np.empty(0)
    b = np.empty(3)
    d = np.empty(3)
    Q = np.empty((3, 3))
    for i in range(lo, hi):
        f = in_face[i]
        for j in range(3):
            b[j] = in_bary[i, j]
            d[j] = in_vec[i, j]
        for r in range(3):
            for c in range(3):
                Q[r, c] = 1.0 if r == c else 0.0
        bad = False
        for j in range(3):
            if not (b[j] >= -1e-9):
                bad = True
        if f < 0 or f >= M[_F].shape[0]:
            bad = True
        if bad:
            out_face[i] = f
            out_status[i] = BAD_INPUT
            out_len[i] = 0.0
            out_steps[i] = 0
            out_npts[i] = 0
            out_bary[i, :] = b
            out_dir[i, :] = 0.0
            out_Q[i] = Q
            continue
        _clean_bary(b)
        length = project_to_face(M, f, d)
        if length > 0.0:
            _normalize(d)
        else:
            length = 0.0
        if record:
            lo_r = rec_ptr[i]
            cap = rec_ptr[i + 1] - lo_r
            res = trace_one(M, f, b, d, length, max_steps, hole_avoid, Q,
                            rec_face[lo_r:], rec_bary[lo_r:], rec_seg[lo_r:], cap)
        else:
            res = trace_one(M, f, b, d, length, max_steps, hole_avoid, Q,
                            dummy_f, dummy_b, dummy_s, 0)
        out_face[i] = res[0]
        out_len[i] = res[1]
        out_status[i] = res[2]
        out_npts[i] = res[3]
        out_steps[i] = res[4]
        out_bary[i, :] = b
        if length > 0.0:
            out_dir[i, :] = d
        else:
            out_dir[i, :] = 0.0
        out_Q[i] = Q


# ---------------------------------------------------------------------------
# projection integration baseline
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _rotate_about(v, axis, angle):
    """Rodrigues rotation of v about a unit axis."""
    c = math.cos(angle)
    s = math.sin(angle)
    k = axis
    kv = np.empty(3)
    _cross(k, v, kv)
    kd = _dot(k, v)
    out = np.empty(3)
    for i in range(3):
        out[i] = v[i] * c + kv[i] * s + k[i] * kd * (1.0 - c)
    return out


@njit(cache=True, nogil=True)
def pi_trace(V, F, N, p, f, d, length, step, max_iter):
    """Projection-integration exp map; returns (face, point, iterations, ok)."""
    pos = p.copy()
    v = d.copy()
    _normalize(v)
    done = 0.0
    it = 0
    # stop on a relative residual: projected steps fall slightly short of h,
    # and a last step of ~1e-17 projects back onto the same point
    while length - done > 1e-12 * length:
        if it >= max_iter:
            return f, pos, it, False
        it += 1
        h = min(step, length - done)
        q = pos + h * v
        g, b0, b1, b2, _ = closest_point_bruteforce(V, F, q)
        q = b0 * V[F[g, 0]] + b1 * V[F[g, 1]] + b2 * V[F[g, 2]]
        n0 = N[f]
        n1 = N[g]
        ax = np.empty(3)
        _cross(n0, n1, ax)
        s = _normalize(ax)
        if s > 1e-15:
            ang = math.acos(min(1.0, max(-1.0, _dot(n0, n1))))
            v = _rotate_about(v, ax, ang)
        # keep the direction in the new face plane
        sn = _dot(v, n1)
        for i in range(3):
            v[i] -= sn * n1[i]
        _normalize(v)
        dq = q - pos
        moved = math.sqrt(_dot(dq, dq))
        if moved <= 1e-300:
            return g, q, it, False
        done += moved
        pos = q
        f = g
    return f, pos, it, True
