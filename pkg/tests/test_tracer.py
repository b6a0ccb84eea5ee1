import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from digeo.errors import BoundaryHit
from digeo.mesh import Location, SurfacePoint, TangentVector, classify, embed, embed_many, project_point
from digeo.sampling import sample_tangents
from digeo.shapes import make_annulus, make_cone, make_icosphere, make_plane, make_random_planar, make_torus
from digeo.tracer import (BatchRequest, TraceConfig, TraceStatus, boundary_continue, default_max_steps,
                          exp_map, geodesic_step, run_batch, trace, trace_batch, traces_to_json,
                          transport_over_edge, transport_over_vertex)


def _point(m, x):
    p, d = project_point(m, np.asarray(x, dtype=float))
    assert d < 1e-9
    return p


# --- flat meshes --------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_flat_mesh_traces_are_straight_lines(seed):
    rng = np.random.default_rng(seed)
    m = make_random_planar(200, rng)
    n = 300
    f, b = [], []
    for x in rng.uniform(-0.5, 0.5, size=(n, 2)):
        p = _point(m, [x[0], x[1], 0.0])
        f.append(p.face)
        b.append(p.bary)
    ang = rng.uniform(0, 2 * np.pi, n)
    L = rng.uniform(0.0, 0.45, n)
    v = np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], 1) * L[:, None]
    res = trace_batch(m, f, b, v)
    assert np.all(res.status == TraceStatus.LENGTH_REACHED)
    X0 = embed_many(m, np.array(f), np.array(b))
    assert np.max(np.abs(res.endpoints(m) - (X0 + v))) < 1e-8
    assert np.max(np.abs(res.rotation - np.eye(3))) < 1e-10
    assert np.allclose(res.length, L, rtol=1e-12, atol=1e-15)


def test_straight_line_through_grid_vertices():
    m = make_plane(10, size=2.0)
    # the grid diagonal passes exactly through vertices
    p = _point(m, [-0.9, -0.9, 0.0])
    tr = trace(m, p, np.array([1.5, 1.5, 0.0]))
    assert tr.terminated_by == TraceStatus.LENGTH_REACHED
    assert np.allclose(embed(tr.final_point, m), [0.6, 0.6, 0.0], atol=1e-12)
    locs = [classify(q.bary)[0] for q in tr.points]
    assert Location.VERTEX in locs


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.8, 0.8), st.floats(-0.8, 0.8), st.floats(0, 2 * math.pi), st.floats(0, 2.0))
def test_flat_trace_stops_at_the_boundary_or_reaches_length(x, y, a, L):
    m = make_plane(7, size=2.0)
    p = _point(m, [x, y, 0.0])
    d = np.array([math.cos(a), math.sin(a), 0.0])
    tr = trace(m, p, d * L)
    # distance to the square boundary along d
    ts = [t for t in ((1 - x) / d[0] if d[0] > 1e-12 else math.inf,
                      (-1 - x) / d[0] if d[0] < -1e-12 else math.inf,
                      (1 - y) / d[1] if d[1] > 1e-12 else math.inf,
                      (-1 - y) / d[1] if d[1] < -1e-12 else math.inf)]
    t_exit = min(ts)
    if L < t_exit - 1e-9:
        assert tr.terminated_by == TraceStatus.LENGTH_REACHED
        assert np.allclose(embed(tr.final_point, m), [x + L * d[0], y + L * d[1], 0], atol=1e-9)
    elif L > t_exit + 1e-9:
        assert tr.terminated_by == TraceStatus.BOUNDARY
        assert tr.traced_length == pytest.approx(t_exit, abs=1e-9)


def test_zero_length_returns_the_start(sphere3):
    p = SurfacePoint(7, (0.2, 0.3, 0.5))
    tr = trace(sphere3, p, np.zeros(3))
    assert tr.final_point == p
    assert tr.traced_length == 0.0
    assert tr.terminated_by == TraceStatus.LENGTH_REACHED
    assert exp_map(sphere3, p, np.zeros(3)) == p


# --- invariants ---------------------------------------------------------

def test_emitted_points_are_on_the_simplex_and_lengths_add_up(sphere3, rng):
    f, b, v = sample_tangents(sphere3, 200, rng, (0.1, 3.0))
    res = trace_batch(sphere3, f, b, v, record_path=True)
    assert np.all(res.path_bary >= -1e-12)
    assert np.allclose(res.path_bary.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(res.bary >= -1e-12)
    assert np.allclose(res.bary.sum(axis=1), 1.0, atol=1e-12)
    L = np.linalg.norm(v, axis=1)
    for i in range(len(f)):
        tr = res[i]
        assert tr.segment_lengths.sum() == pytest.approx(tr.traced_length, rel=1e-12)
        assert tr.traced_length == pytest.approx(L[i], rel=1e-12)
        # consecutive points are joined by straight segments inside one face
        P = tr.polyline(sphere3)
        assert np.allclose(np.linalg.norm(np.diff(P, axis=0), axis=1), tr.segment_lengths, atol=1e-12)


def test_final_direction_is_tangent_and_unit(sphere3, rng):
    f, b, v = sample_tangents(sphere3, 300, rng)
    res = trace_batch(sphere3, f, b, v)
    n = sphere3.face_normals[res.face]
    assert np.max(np.abs(np.sum(res.dir * n, axis=1))) < 1e-10
    assert np.allclose(np.linalg.norm(res.dir, axis=1), 1.0, atol=1e-12)


def test_transport_preserves_norms_and_is_orthogonal(torus_coarse, rng):
    f, b, v = sample_tangents(torus_coarse, 300, rng, (0.5, 4.0))
    w = rng.normal(size=(300, 3))
    w -= np.sum(w * torus_coarse.face_normals[f], axis=1, keepdims=True) * torus_coarse.face_normals[f]
    res = trace_batch(torus_coarse, f, b, v, payloads=w)
    ratio = np.linalg.norm(res.payload, axis=1) / np.linalg.norm(w, axis=1)
    assert np.max(np.abs(ratio - 1)) < 1e-10
    RtR = np.einsum("nji,njk->nik", res.rotation, res.rotation)
    assert np.max(np.abs(RtR - np.eye(3))) < 1e-10
    # transported payloads stay tangent at the end
    assert np.max(np.abs(np.sum(res.payload * torus_coarse.face_normals[res.face], axis=1))) < 1e-9
    # the adjoint of the transport is its transpose
    u = rng.normal(size=3)
    tr = trace(torus_coarse, SurfacePoint(int(f[0]), tuple(b[0])), v[0])
    assert tr.transport(u) @ w[1] == pytest.approx(u @ tr.transport_back(w[1]), abs=1e-12)


def test_transport_keeps_the_angle_to_the_curve(sphere4, rng):
    f, b, v = sample_tangents(sphere4, 100, rng)
    w = rng.normal(size=(100, 3))
    n0 = sphere4.face_normals[f]
    w -= np.sum(w * n0, axis=1, keepdims=True) * n0
    res = trace_batch(sphere4, f, b, v, payloads=w)
    d0 = v / np.linalg.norm(v, axis=1, keepdims=True)
    c0 = np.sum(w * d0, axis=1) / np.linalg.norm(w, axis=1)
    c1 = np.sum(res.payload * res.dir, axis=1) / np.linalg.norm(res.payload, axis=1)
    assert np.allclose(c0, c1, atol=1e-10)


# --- curvature ----------------------------------------------------------

def test_octant_loop_holonomy():
    m = make_icosphere(6)
    p = _point_near(m, [1.0, 0.0, 0.0])
    d = np.array([0.0, 0.0, 1.0])
    n0 = m.face_normals[p.face]
    d -= (d @ n0) * n0
    d /= np.linalg.norm(d)
    w0 = d.copy()
    w = w0.copy()
    q = p
    for _ in range(3):
        tr = trace(m, q, d * (np.pi / 2), TraceConfig(transport_payload=w))
        assert tr.terminated_by == TraceStatus.LENGTH_REACHED
        q = tr.final_point
        w = tr.payload
        n = m.face_normals[q.face]
        d = np.cross(n, tr.final_dir)  # left turn
        d /= np.linalg.norm(d)
    x = embed(q, m)
    assert np.linalg.norm(x - embed(p, m)) < 2e-2
    n = m.face_normals[q.face]
    ang = math.atan2(np.cross(w0, w) @ n, w0 @ w)
    assert abs(abs(ang) - np.pi / 2) < 2e-2


def _point_near(m, x):
    x = np.asarray(x, dtype=float)
    return project_point(m, x)[0]


def test_cone_apex_splits_the_total_angle():
    m = make_cone(radius=3.0, height=math.sqrt(7.0), n_around=64, n_rings=8)
    theta = m.vertex_total_angle[0]
    assert abs(theta - 1.5 * np.pi) < 1e-3
    a = m.corner_angles[0, 0]
    apex = m.vertices[0]

    def psi(y, face):
        e = m.vertices[m.faces[face, 1]] - apex
        r = y - apex
        return face * a + math.atan2(np.linalg.norm(np.cross(e, r)), e @ r)

    for psi0 in (0.37 * a, 5.5 * a, 40.2 * a):
        face = int(psi0 // a)
        e1 = m.vertices[m.faces[face, 1]] - apex
        e1 /= np.linalg.norm(e1)
        u = m.vertices[m.faces[face, 2]] - apex
        e2 = u - (u @ e1) * e1
        e2 /= np.linalg.norm(e2)
        loc = psi0 - face * a
        x0 = apex + 0.3 * (math.cos(loc) * e1 + math.sin(loc) * e2)
        p = _point(m, x0)
        tr = trace(m, p, (apex - x0) / 0.3 * 0.65)
        assert tr.terminated_by == TraceStatus.LENGTH_REACHED
        y = embed(tr.final_point, m)
        assert np.linalg.norm(y - apex) == pytest.approx(0.35, abs=1e-9)
        assert tr.final_point.face < 64
        expect = (psi0 + theta / 2) % theta
        assert psi(y, tr.final_point.face) == pytest.approx(expect, abs=1e-9)


def test_outer_equator_of_the_torus_is_traced_exactly():
    # the strips beside the equator are planar trapezoids, so both sides of
    # each equator vertex carry the same angle and the trace follows the ring
    m = make_torus(2.0, 1.0, 64, 32)
    ring = np.flatnonzero((np.abs(m.vertices[:, 2]) < 1e-12) & (np.linalg.norm(m.vertices[:, :2], axis=1) > 2.9))
    ang = np.arctan2(m.vertices[ring, 1], m.vertices[ring, 0]) % (2 * np.pi)
    v0, v1 = ring[np.argsort(ang)[:2]]
    d = m.vertices[v1] - m.vertices[v0]
    tr = trace(m, SurfacePoint.vertex(m, int(v0)), d / np.linalg.norm(d) * 2.0)
    assert tr.terminated_by == TraceStatus.LENGTH_REACHED
    P = tr.polyline(m)
    assert np.max(np.abs(P[:, 2])) < 1e-12
    assert np.allclose(np.linalg.norm(P[:, :2], axis=1), 3.0, atol=1e-2)


def test_sphere_error_decreases_under_refinement():
    errs = []
    for k in (3, 4):
        m = make_icosphere(k)
        f, b, v = sample_tangents(m, 300, np.random.default_rng(5))
        res = trace_batch(m, f, b, v)
        X = embed_many(m, f, b)
        P = X / np.linalg.norm(X, axis=1, keepdims=True)
        W = v - np.sum(v * P, axis=1, keepdims=True) * P
        W *= (np.linalg.norm(v, axis=1) / np.linalg.norm(W, axis=1))[:, None]
        L = np.linalg.norm(W, axis=1, keepdims=True)
        ref = np.cos(L) * P + np.sin(L) * W / L
        errs.append(np.mean(np.linalg.norm(res.endpoints(m) - ref, axis=1)))
    assert errs[1] < errs[0] < 1e-2


# --- boundaries ---------------------------------------------------------

def _annulus_detour():
    """Start, vector, expected end and length of a trace skirting the octagonal hole."""
    r = 0.3
    corner = lambda k: np.array([r * math.cos(k * np.pi / 4), r * math.sin(k * np.pi / 4)])
    a, b, c = corner(4), corner(3), corner(2)  # (-0.3,0), 135 deg, 90 deg
    t = 0.1 / b[1]
    hit = a + t * (b - a)
    s1 = hit[0] + 0.8
    s2 = (1 - t) * np.linalg.norm(b - a)
    s3 = np.linalg.norm(c - b)
    rest = 1.6 - s1 - s2 - s3
    return s1, np.array([c[0] + rest, c[1], 0.0])


def test_hole_avoidance_goes_around_the_hole_and_keeps_the_length():
    m = make_annulus(0.3, 1.0, 8, 10)
    p = _point(m, [-0.8, 0.1, 0.0])
    v = np.array([1.6, 0.0, 0.0])
    plain = trace(m, p, v)
    s1, end = _annulus_detour()
    assert plain.terminated_by == TraceStatus.BOUNDARY
    assert plain.traced_length == pytest.approx(s1, abs=1e-12)
    tr = trace(m, p, v, TraceConfig(hole_avoidance=True))
    assert tr.terminated_by == TraceStatus.LENGTH_REACHED
    assert tr.traced_length == pytest.approx(1.6, rel=1e-12)
    assert tr.segment_lengths.sum() == pytest.approx(1.6, rel=1e-12)
    assert np.allclose(embed(tr.final_point, m), end, atol=1e-12)


def test_boundary_continue_slides_and_resumes():
    m = make_annulus(0.3, 1.0, 8, 10)
    # stop on the hole edge between 180 and 135 degrees, heading +x
    tr = trace(m, _point(m, [-0.8, 0.1, 0.0]), np.array([1.0, 0.0, 0.0]))
    assert tr.terminated_by == TraceStatus.BOUNDARY
    assert classify(tr.final_point.bary)[0] == Location.EDGE
    p2, v2 = boundary_continue(m, tr.final_point, np.array([1.0, 0.0, 0.0]))
    # the edge point moves to the 135 degree corner, where +x still points
    # into the hole, so the boundary is followed on to the top corner
    assert np.allclose(embed(p2, m), [0.0, 0.3, 0.0], atol=1e-12)
    assert np.linalg.norm(v2) == pytest.approx(1.0)
    # from the top corner +x leaves the hole: tracing resumes there
    p3, v3 = boundary_continue(m, p2, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(embed(p3, m), [0.0, 0.3, 0.0], atol=1e-12)
    assert np.allclose(v3, [1.0, 0.0, 0.0], atol=1e-12)
    assert abs(v3 @ m.face_normals[p3.face]) < 1e-12
    with pytest.raises(ValueError):
        boundary_continue(m, SurfacePoint(0, (1 / 3, 1 / 3, 1 / 3)), np.array([1.0, 0, 0]))


def test_max_steps_status(sphere4):
    p = SurfacePoint(0, (1 / 3, 1 / 3, 1 / 3))
    v = sphere4.vertices[sphere4.faces[0, 1]] - sphere4.vertices[sphere4.faces[0, 0]]
    v = v / np.linalg.norm(v) * 3.0
    tr = trace(sphere4, p, v, TraceConfig(max_steps=3))
    assert tr.terminated_by == TraceStatus.MAX_STEPS
    assert tr.traced_length < 3.0
    assert default_max_steps(sphere4) == int(10 * math.sqrt(sphere4.n_faces) + 100)
    with pytest.raises(ValueError):
        TraceConfig(max_steps=0)


def test_invalid_input_reported_in_status(sphere3):
    res = trace_batch(sphere3, [0, 0], [[1 / 3, 1 / 3, 1 / 3], [np.nan, 0.5, 0.5]],
                      [[0.1, 0, 0], [0.1, 0, 0]])
    assert res.status[1] == TraceStatus.INVALID_INPUT
    assert res.error(1) == "INVALID_INPUT"
    assert res.error(0) is None


# --- single-step primitives ---------------------------------------------

def test_geodesic_step_on_a_plane():
    m = make_plane(1, size=2.0)  # two triangles
    p = _point(m, [-0.5, -0.8, 0.0])
    p2, v2, s = geodesic_step(m, p, np.array([0.0, 3.0, 0.0]))
    x = embed(p2, m)
    assert x[0] == pytest.approx(-0.5)
    assert s == pytest.approx(np.linalg.norm(x - embed(p, m)))
    assert np.linalg.norm(v2) == pytest.approx(3.0)
    assert classify(p2.bary)[0] == Location.EDGE


def test_transport_over_edge_unfolds_a_hinge():
    from digeo.mesh import Mesh

    V = np.array([[0, 0, 0], [1, 0, 0], [0.5, 1, 0], [0.5, -0.6, -0.8]], float)
    m = Mesh(V, [[0, 1, 2], [1, 0, 3]])
    p = SurfacePoint(0, (0.5, 0.5, 0.0))  # midpoint of the shared edge
    d = np.array([0.6, -0.8, 0.0])
    q, w = transport_over_edge(m, 0, p.bary, d)
    assert q.face == 1
    assert np.allclose(embed(q, m), embed(p, m))
    assert abs(w @ m.face_normals[1]) < 1e-12
    e = np.array([1.0, 0, 0])
    assert w @ e == pytest.approx(d @ e)  # angle to the hinge is kept
    assert np.linalg.norm(w) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        transport_over_edge(m, 0, (1 / 3, 1 / 3, 1 / 3), d)
    with pytest.raises(BoundaryHit):
        transport_over_edge(m, 0, (0.0, 0.5, 0.5), np.array([1.0, 1.0, 0.0]))


def test_transport_over_vertex_goes_straight_on_a_flat_grid():
    m = make_plane(4, size=2.0)
    v = int(np.argmin(np.linalg.norm(m.vertices, axis=1)))  # the centre vertex
    d = np.array([math.cos(0.3), math.sin(0.3), 0.0])
    # arrive through the face that holds the incoming ray
    f = project_point(m, -0.05 * d)[0].face
    k = int(np.flatnonzero(m.faces[f] == v)[0])
    b = [0.0, 0.0, 0.0]
    b[k] = 1.0
    q, w = transport_over_vertex(m, f, b, d)
    assert np.allclose(w, d, atol=1e-12)
    # the new face contains the ray leaving the vertex
    tr = trace(m, q, w * 0.1)
    assert np.allclose(embed(tr.final_point, m), 0.1 * d, atol=1e-12)
    corner = int(np.flatnonzero(m.boundary_vertex)[0])
    fb, kb = m.vertex_corner(corner)
    bb = [0.0, 0.0, 0.0]
    bb[kb] = 1.0
    with pytest.raises(BoundaryHit):
        transport_over_vertex(m, fb, bb, -m.vertices[corner])


# --- batching -----------------------------------------------------------

def test_batch_matches_single_traces(sphere3, rng):
    f, b, v = sample_tangents(sphere3, 50, rng)
    res = trace_batch(sphere3, f, b, v)
    for i in range(50):
        one = trace_batch(sphere3, f[i:i + 1], b[i:i + 1], v[i:i + 1])
        assert np.array_equal(one.bary[0], res.bary[i])
        assert np.array_equal(one.rotation[0], res.rotation[i])


@pytest.mark.parametrize("workers", [2, 3, 8])
def test_worker_count_does_not_change_results(sphere4, rng, workers):
    f, b, v = sample_tangents(sphere4, 2000, rng)
    assert trace_batch(sphere4, f, b, v, workers=1).same_as(trace_batch(sphere4, f, b, v, workers=workers))


def test_env_worker_override(sphere3, rng, monkeypatch):
    monkeypatch.setenv("DIGEO_WORKERS", "3")
    f, b, v = sample_tangents(sphere3, 100, rng)
    assert trace_batch(sphere3, f, b, v).same_as(trace_batch(sphere3, f, b, v, workers=1))


def test_path_recording_does_not_change_results(sphere3, rng):
    f, b, v = sample_tangents(sphere3, 100, rng)
    assert trace_batch(sphere3, f, b, v).same_as(trace_batch(sphere3, f, b, v, record_path=True))
    with pytest.raises(ValueError):
        trace_batch(sphere3, f, b, v)[0]


def test_batch_request_and_tangent_vectors(sphere3):
    p = SurfacePoint(0, (1 / 3, 1 / 3, 1 / 3))
    q = SurfacePoint(1, (1 / 3, 1 / 3, 1 / 3))
    n = sphere3.face_normals[0]
    d = np.cross(n, [0, 0, 1.0])
    req = BatchRequest(sphere3, [p], [TangentVector(p, d)])
    res = run_batch(req)
    assert res.status[0] == TraceStatus.LENGTH_REACHED
    with pytest.raises(ValueError):
        BatchRequest(sphere3, [p], [])
    with pytest.raises(ValueError):
        run_batch(BatchRequest(sphere3, [q], [TangentVector(p, d)]))
    with pytest.raises(ValueError):
        trace(sphere3, q, TangentVector(p, d))


def test_json_and_obj_exports(sphere3):
    tr = trace(sphere3, SurfacePoint(0, (1 / 3, 1 / 3, 1 / 3)),
               np.cross(sphere3.face_normals[0], [0, 0, 1.0]))
    doc = json.loads(traces_to_json([tr]))
    assert doc["schema"] == "digeo.traces/1"
    t = doc["traces"][0]
    assert set(t) == {"points", "segment_lengths", "final_point", "final_dir", "traced_length",
                      "terminated_by", "payload"}
    assert t["terminated_by"] == "LENGTH_REACHED"
    obj = tr.to_obj_polyline(sphere3)
    assert obj.count("\nv ") + 1 == len(tr.points)
    assert obj.rstrip().splitlines()[-1].startswith("l 1 2")
