"""Random surface points and tangent vectors."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


def sample_points(m: Mesh, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-by-area surface points as (faces, barys)."""
    cdf = np.cumsum(m.face_areas)
    faces = np.searchsorted(cdf, rng.uniform(0, cdf[-1], n), side="right")
    faces = np.minimum(faces, m.n_faces - 1).astype(np.int64)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    barys = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    return faces, barys


def sample_directions(m: Mesh, faces: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit directions uniformly distributed in each face plane."""
    X = m.vertices[m.faces[faces]]
    e1 = X[:, 1] - X[:, 0]
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(m.face_normals[faces], e1)
    ang = rng.uniform(0, 2 * np.pi, len(faces))
    return np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2


def sample_tangents(m: Mesh, n: int, rng: np.random.Generator,
                    length_range: tuple[float, float] = (0.1, np.pi / 2)):
    """Random (faces, barys, vecs) with lengths uniform in ``length_range``."""
    faces, barys = sample_points(m, n, rng)
    d = sample_directions(m, faces, rng)
    L = rng.uniform(length_range[0], length_range[1], n)
    return faces, barys, d * L[:, None]
