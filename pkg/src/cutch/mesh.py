"""Structured background triangulation of the square [-0.5, 0.5]^2."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BackgroundMesh:
    """Fixed P1 background mesh with edge topology.

    ``interior_faces`` rows are ``(v0, v1, left_tri, right_tri)`` and
    ``boundary_faces`` rows are ``(v0, v1, tri)``.
    """

    n: int
    vertices: np.ndarray
    triangles: np.ndarray
    interior_faces: np.ndarray
    boundary_faces: np.ndarray
    h: float
    areas: np.ndarray = field(repr=False)
    # constant P1 basis gradients per triangle, shape (n_tri, 3, 2)
    grads: np.ndarray = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def to_csv(self, path) -> None:
        """Write the ``vertices`` and ``triangles`` sections as CSV."""
        with open(path, "w") as f:
            f.write("vertices\nid,x,y\n")
            for i, (x, y) in enumerate(self.vertices):
                f.write(f"{i},{x!r},{y!r}\n")
            f.write("triangles\nid,v0,v1,v2\n")
            for i, (a, b, c) in enumerate(self.triangles):
                f.write(f"{i},{a},{b},{c}\n")


def triangle_gradients(p: np.ndarray):
    """Areas and P1 basis gradients for triangles with vertex coords ``p``.

    ``p`` has shape (m, 3, 2). Areas are signed (positive for CCW).
    """
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    # gradients of barycentrics 1 and 2 are the rows of inv([e1 e2])
    g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det[:, None]
    g0 = -g1 - g2
    return 0.5 * det, np.stack([g0, g1, g2], axis=1)


def build_background_mesh(n: int) -> BackgroundMesh:
    """n x n squares, each split along its lower-left to upper-right diagonal."""
    if n < 1:
        raise ValueError(f"need at least one subdivision per side, got n={n}")
    t = np.linspace(-0.5, 0.5, n + 1)
    X, Y = np.meshgrid(t, t)  # row-major: index = j*(n+1) + i
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    v00 = j * (n + 1) + i
    v10 = v00 + 1
    v01 = v00 + n + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * n * n, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    # edges: sort endpoints, group identical pairs
    local = np.array([[0, 1], [1, 2], [2, 0]])
    edges = triangles[:, local].reshape(-1, 2)
    owner = np.repeat(np.arange(len(triangles)), 3)
    key = np.sort(edges, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    key, owner = key[order], owner[order]
    same = np.all(key[1:] == key[:-1], axis=1)
    first = np.flatnonzero(same)
    interior = np.column_stack([key[first], owner[first], owner[first + 1]])
    paired = np.zeros(len(key), dtype=bool)
    paired[first] = True
    paired[first + 1] = True
    boundary = np.column_stack([key[~paired], owner[~paired]])

    areas, grads = triangle_gradients(vertices[triangles])
    return BackgroundMesh(
        n=n,
        vertices=vertices,
        triangles=triangles,
        interior_faces=interior,
        boundary_faces=boundary,
        h=float(np.sqrt(2.0) / n),
        areas=areas,
        grads=grads,
    )
