"""Deterministic parametric mesh generators used as fixtures and CLI outputs.

All vertices lie exactly on the analytic surface (up to rounding).
"""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + 5.0 ** 0.5) / 2.0
    V = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    F = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return V / np.linalg.norm(V, axis=1, keepdims=True), F


def icosphere_arrays(subdiv: int, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    V, F = _icosahedron()
    for _ in range(subdiv):
        e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
        e.sort(axis=1)
        uniq, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.ravel()
        mid = V[uniq[:, 0]] + V[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(V)  # midpoints of edges (01, 12, 20)
        V = np.concatenate([V, mid])
        a, b, c = F[:, 0], F[:, 1], F[:, 2]
        m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
        F = np.concatenate([
            np.stack([a, m01, m20], 1),
            np.stack([b, m12, m01], 1),
            np.stack([c, m20, m12], 1),
            np.stack([m01, m12, m20], 1),
        ])
    return V * radius, F


def make_icosphere(subdiv: int, radius: float = 1.0) -> Mesh:
    """Geodesic icosphere with ``20 * 4**subdiv`` faces."""
    if subdiv < 0:
        raise ValueError("subdiv must be >= 0")
    return Mesh(*icosphere_arrays(subdiv, radius))


def torus_point(alpha, beta, R: float, r: float) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    rho = R + r * np.cos(beta)
    return np.stack([rho * np.cos(alpha), rho * np.sin(alpha), r * np.sin(beta)], axis=-1)


def make_torus(R: float, r: float, n_alpha: int, n_beta: int) -> Mesh:
    """Torus grid with ``2 * n_alpha * n_beta`` faces."""
    if not R > r > 0:
        raise ValueError("need R > r > 0")
    if n_alpha < 3 or n_beta < 3:
        raise ValueError("need at least 3 samples per direction")
    a = 2 * np.pi * np.arange(n_alpha) / n_alpha
    b = 2 * np.pi * np.arange(n_beta) / n_beta
    A, B = np.meshgrid(a, b, indexing="ij")
    V = torus_point(A.ravel(), B.ravel(), R, r)
    i, j = np.meshgrid(np.arange(n_alpha), np.arange(n_beta), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v00 = i * n_beta + j
    v10 = ((i + 1) % n_alpha) * n_beta + j
    v01 = i * n_beta + (j + 1) % n_beta
    v11 = ((i + 1) % n_alpha) * n_beta + (j + 1) % n_beta
    F = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
    return Mesh(V, F)


def _grid_faces(nx: int, ny: int) -> np.ndarray:
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v00 = i * (ny + 1) + j
    v10 = (i + 1) * (ny + 1) + j
    v01 = i * (ny + 1) + j + 1
    v11 = (i + 1) * (ny + 1) + j + 1
    return np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])


def make_plane(nx: int = 10, ny: int | None = None, size: float = 1.0) -> Mesh:
    """Square ``[-size/2, size/2]^2`` in the z=0 plane, each cell split in two."""
    ny = nx if ny is None else ny
    xs = np.linspace(-size / 2, size / 2, nx + 1)
    ys = np.linspace(-size / 2, size / 2, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    V = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    return Mesh(V, _grid_faces(nx, ny))


def make_cylinder(radius: float = 1.0, height: float = 2.0, n_around: int = 32, n_height: int = 16) -> Mesh:
    """Open cylinder around the z axis (both ends are boundary loops)."""
    a = 2 * np.pi * np.arange(n_around) / n_around
    z = np.linspace(-height / 2, height / 2, n_height + 1)
    A, Z = np.meshgrid(a, z, indexing="ij")
    V = np.stack([radius * np.cos(A.ravel()), radius * np.sin(A.ravel()), Z.ravel()], axis=1)
    i, j = np.meshgrid(np.arange(n_around), np.arange(n_height), indexing="ij")
    i, j = i.ravel(), j.ravel()
    col = n_height + 1
    v00 = i * col + j
    v10 = ((i + 1) % n_around) * col + j
    v01 = i * col + j + 1
    v11 = ((i + 1) % n_around) * col + j + 1
    F = np.concatenate([np.stack([v00, v10, v11], 1), np.stack([v00, v11, v01], 1)])
    return Mesh(V, F)


def make_cone(radius: float = 1.0, height: float = 1.0, n_around: int = 32, n_rings: int = 8) -> Mesh:
    """Open cone with its apex at ``(0, 0, height)`` and the base circle at z=0."""
    a = 2 * np.pi * np.arange(n_around) / n_around
    verts = [[0.0, 0.0, height]]
    for k in range(1, n_rings + 1):
        t = k / n_rings
        for ang in a:
            verts.append([t * radius * np.cos(ang), t * radius * np.sin(ang), height * (1 - t)])
    V = np.asarray(verts)
    faces = []
    for i in range(n_around):
        faces.append([0, 1 + i, 1 + (i + 1) % n_around])
    for k in range(1, n_rings):
        base0 = 1 + (k - 1) * n_around
        base1 = 1 + k * n_around
        for i in range(n_around):
            i1 = (i + 1) % n_around
            faces.append([base0 + i, base1 + i, base1 + i1])
            faces.append([base0 + i, base1 + i1, base0 + i1])
    return Mesh(V, np.asarray(faces, dtype=np.int64))


def make_disk(radius: float = 1.0, n_rings: int = 12, n_around: int = 24) -> Mesh:
    """Planar disk centred at the origin built from concentric rings."""
    verts = [[0.0, 0.0, 0.0]]
    faces = []
    for k in range(1, n_rings + 1):
        r = radius * k / n_rings
        m = n_around * k
        off = np.pi / m if k % 2 else 0.0
        for i in range(m):
            ang = 2 * np.pi * i / m + off
            verts.append([r * np.cos(ang), r * np.sin(ang), 0.0])
    V = np.asarray(verts)
    # stitch consecutive rings by merging angular orderings
    ring_start = [0]
    ring_size = [1]
    for k in range(1, n_rings + 1):
        ring_start.append(ring_start[-1] + ring_size[-1])
        ring_size.append(n_around * k)
    angle = np.arctan2(V[:, 1], V[:, 0]) % (2 * np.pi)
    for k in range(1, n_rings + 1):
        inner = list(range(ring_start[k - 1], ring_start[k - 1] + ring_size[k - 1]))
        outer = list(range(ring_start[k], ring_start[k] + ring_size[k]))
        if k == 1:
            for i in range(len(outer)):
                faces.append([0, outer[i], outer[(i + 1) % len(outer)]])
            continue
        faces.extend(_stitch_rings(inner, outer, angle))
    return Mesh(V, np.asarray(faces, dtype=np.int64))


def _stitch_rings(inner: list[int], outer: list[int], angle: np.ndarray) -> list[list[int]]:
    """Triangulate the band between two closed vertex rings (both counter-clockwise)."""
    inner = sorted(inner, key=lambda v: angle[v])
    outer = sorted(outer, key=lambda v: angle[v])
    ni, no = len(inner), len(outer)
    faces = []
    i = j = 0
    # advance on whichever ring has the smaller next angle
    while i < ni or j < no:
        ai = angle[inner[(i + 1) % ni]] + (2 * np.pi if i + 1 >= ni else 0.0)
        aj = angle[outer[(j + 1) % no]] + (2 * np.pi if j + 1 >= no else 0.0)
        if j < no and (i >= ni or aj <= ai):
            faces.append([inner[i % ni], outer[j % no], outer[(j + 1) % no]])
            j += 1
        else:
            faces.append([inner[i % ni], outer[j % no], inner[(i + 1) % ni]])
            i += 1
    return faces


def make_annulus(r_in: float = 0.3, r_out: float = 1.0, n_hole: int = 8, n_rings: int = 10) -> Mesh:
    """Planar annulus whose hole is a regular ``n_hole``-gon of circumradius ``r_in``."""
    verts = []
    rings = []
    for k in range(n_rings + 1):
        r = r_in + (r_out - r_in) * k / n_rings
        m = n_hole * (k + 1)
        ring = []
        for i in range(m):
            if k == 0:
                ang = 2 * np.pi * i / m
                p = [r * np.cos(ang), r * np.sin(ang), 0.0]
            else:
                ang = 2 * np.pi * (i + 0.5 * (k % 2)) / m
                p = [r * np.cos(ang), r * np.sin(ang), 0.0]
            ring.append(len(verts))
            verts.append(p)
        rings.append(ring)
    V = np.asarray(verts)
    angle = np.arctan2(V[:, 1], V[:, 0]) % (2 * np.pi)
    faces = []
    for k in range(1, n_rings + 1):
        faces.extend(_stitch_rings(rings[k - 1], rings[k], angle))
    return Mesh(V, np.asarray(faces, dtype=np.int64))


def make_random_planar(n_points: int, rng: np.random.Generator, size: float = 2.0) -> Mesh:
    """Delaunay triangulation of random points plus the square corners (z=0)."""
    from scipy.spatial import Delaunay

    half = size / 2
    corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    pts = np.concatenate([corners, rng.uniform(-half, half, size=(n_points, 2))])
    tri = Delaunay(pts)
    V = np.concatenate([pts, np.zeros((len(pts), 1))], axis=1)
    F = tri.simplices.astype(np.int64)
    # drop slivers from nearly collinear hull points
    x0, x1, x2 = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(x1 - x0, x2 - x0), axis=1)
    F = F[area > 1e-10 * size * size]
    used = np.unique(F)
    remap = -np.ones(len(V), np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(V[used], remap[F])


SHAPES = ("icosphere", "torus", "plane", "cylinder", "cone")
