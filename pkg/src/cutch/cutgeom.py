"""Level-set geometry, element classification and cut-cell quadrature.

Sign convention: the level set is positive inside the embedded hole, so the
physical domain is ``{phi < 0}`` and ``grad(phi)`` points out of it.
All cut geometry uses the linear vertex interpolant of ``phi`` per element,
so the discrete interface is a polyline.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import BackgroundMesh

PHYSICAL, CUT, EXTERNAL = 0, 1, 2
SNAP_TOL = 1e-12
DEGENERATE_AREA = 1e-14


@dataclass(frozen=True)
class LevelSet:
    """Circular hole, either fixed at the origin or moving vertically.

    For ``fixed_circle`` the diameter is ``mu``. For ``moving_circle`` the
    diameter is ``delta`` and the center follows
    ``theta0 + x0 * sin(140 pi m(t)) j`` with ``m`` linear in ``t`` from
    ``mu_min`` (t=0) to ``mu_max`` (t=T).
    """

    kind: str = "fixed_circle"
    mu: float = 0.0
    delta: float = 0.42
    theta0: tuple = (0.0, 0.1)
    x0: float = 0.0039
    mu_min: float = 0.1
    mu_max: float = 0.15
    T: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed_circle", "moving_circle"):
            raise ValueError(f"unknown level set kind {self.kind!r}")

    @classmethod
    def circle(cls, mu: float) -> "LevelSet":
        return cls(kind="fixed_circle", mu=float(mu))

    def center(self, t: float = 0.0):
        if self.kind == "fixed_circle":
            return 0.0, 0.0
        m = (self.mu_max - self.mu_min) * t / self.T + self.mu_min
        return self.theta0[0], self.theta0[1] + self.x0 * np.sin(140.0 * np.pi * m)

    @property
    def diameter(self) -> float:
        return self.mu if self.kind == "fixed_circle" else self.delta

    def __call__(self, x, y, t: float = 0.0):
        cx, cy = self.center(t)
        return self.diameter**2 / 4.0 - ((x - cx) ** 2 + (y - cy) ** 2)


@dataclass(frozen=True)
class CutClassification:
    element_tag: np.ndarray
    phi: np.ndarray  # snapped vertex values
    active_elements: np.ndarray
    cut_elements: np.ndarray
    stab_faces: np.ndarray  # indices into mesh.interior_faces
    active_dofs: np.ndarray
    active_mask: np.ndarray  # boolean over vertices


@dataclass
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    normals: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.weights)

    @classmethod
    def empty(cls, with_normals=False):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)) if with_normals else None)


def vertex_values(mesh: BackgroundMesh, ls: LevelSet, t: float = 0.0) -> np.ndarray:
    phi = ls(mesh.vertices[:, 0], mesh.vertices[:, 1], t)
    phi = np.asarray(phi, dtype=float).copy()
    phi[np.abs(phi) < SNAP_TOL] = -SNAP_TOL
    return phi


def classify(mesh: BackgroundMesh, ls: LevelSet, t: float = 0.0) -> CutClassification:
    phi = vertex_values(mesh, ls, t)
    neg = (phi[mesh.triangles] < 0).sum(axis=1)
    tag = np.full(mesh.n_triangles, CUT, dtype=np.int8)
    tag[neg == 3] = PHYSICAL
    tag[neg == 0] = EXTERNAL
    active = tag != EXTERNAL
    f = mesh.interior_faces
    left, right = f[:, 2], f[:, 3]
    # faces of the active mesh touching a cut element
    stab = np.flatnonzero(
        active[left] & active[right] & ((tag[left] == CUT) | (tag[right] == CUT))
    )
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    mask[mesh.triangles[active].ravel()] = True
    return CutClassification(
        element_tag=tag,
        phi=phi,
        active_elements=np.flatnonzero(active),
        cut_elements=np.flatnonzero(tag == CUT),
        stab_faces=stab,
        active_dofs=np.flatnonzero(mask),
        active_mask=mask,
    )


# -- reference rules ---------------------------------------------------------


@lru_cache(maxsize=None)
def reference_rule(order: int):
    """Collapsed Gauss rule on the unit triangle, exact for total degree ``order``.

    Returns barycentric coordinates (m, 3) and weights summing to 1 (i.e.
    normalised by the triangle area).
    """
    m = max(1, int(np.ceil((order + 1) / 2)))
    xs, ws = roots_legendre(m)
    xt, wt = roots_jacobi(m, 1.0, 0.0)
    s = 0.5 * (xs + 1.0)
    t = 0.5 * (xt + 1.0)
    S, T = np.meshgrid(s, t, indexing="ij")
    W = np.outer(0.5 * ws, 0.25 * wt)
    xi = (S * (1.0 - T)).ravel()
    eta = T.ravel()
    bary = np.column_stack([1.0 - xi - eta, xi, eta])
    w = 2.0 * W.ravel()  # reference triangle area is 1/2
    return bary, w


@lru_cache(maxsize=None)
def segment_rule(order: int):
    """Gauss-Legendre on [0, 1] exact for degree ``order``; weights sum to 1."""
    m = max(1, int(np.ceil((order + 1) / 2)))
    x, w = roots_legendre(m)
    return 0.5 * (x + 1.0), 0.5 * w


# -- per element geometry ----------------------------------------------------


def _edge_crossings(p, phi):
    """Points where the linear interpolant vanishes on sign-changing edges."""
    out = []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        if (phi[a] < 0) != (phi[b] < 0):
            s = phi[a] / (phi[a] - phi[b])
            out.append(p[a] + s * (p[b] - p[a]))
    return out


def physical_polygon(p: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Vertices (CCW) of ``{phi_h < 0}`` inside the triangle ``p``."""
    poly = []
    for a in range(3):
        b = (a + 1) % 3
        if phi[a] < 0:
            poly.append(p[a])
        if (phi[a] < 0) != (phi[b] < 0):
            s = phi[a] / (phi[a] - phi[b])
            poly.append(p[a] + s * (p[b] - p[a]))
    return np.array(poly).reshape(-1, 2)


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _map_rule(tri_pts: np.ndarray, order: int):
    """Physical points and weights of the reference rule mapped to ``tri_pts``."""
    bary, w = reference_rule(order)
    area = polygon_area(tri_pts)
    return bary @ tri_pts, w * area


def cut_volume_quadrature(p: np.ndarray, phi: np.ndarray, order: int = 4) -> QuadratureRule:
    """Quadrature on the physical part of one triangle.

    ``p`` are the three vertex coordinates and ``phi`` the (snapped) vertex
    values of the level set.
    """
    neg = phi < 0
    if neg.all():
        pts, w = _map_rule(p, order)
        return QuadratureRule(pts, w)
    if not neg.any():
        return QuadratureRule.empty()
    poly = physical_polygon(p, phi)
    area_k = abs(polygon_area(p))
    if polygon_area(poly) < DEGENERATE_AREA * area_k:
        return QuadratureRule.empty()
    pts, ws = [], []
    for k in range(1, len(poly) - 1):
        sub = np.array([poly[0], poly[k], poly[k + 1]])
        if polygon_area(sub) <= 0.0:
            continue
        q, w = _map_rule(sub, order)
        pts.append(q)
        ws.append(w)
    return QuadratureRule(np.vstack(pts), np.concatenate(ws))


def interface_quadrature(p: np.ndarray, phi: np.ndarray, order: int = 3) -> QuadratureRule:
    """Gauss rule on the straight zero segment of the interpolant in one triangle."""
    neg = phi < 0
    if neg.all() or not neg.any():
        return QuadratureRule.empty(with_normals=True)
    a, b = _edge_crossings(p, phi)
    length = float(np.hypot(*(b - a)))
    if length == 0.0:
        return QuadratureRule.empty(with_normals=True)
    # gradient of the linear interpolant
    _, g = _grads_one(p)
    grad = phi @ g
    normal = grad / np.linalg.norm(grad)
    s, w = segment_rule(order)
    pts = a[None, :] + s[:, None] * (b - a)[None, :]
    return QuadratureRule(pts, w * length, np.tile(normal, (len(w), 1)))


def _grads_one(p):
    e1, e2 = p[1] - p[0], p[2] - p[0]
    det = e1[0] * e2[1] - e1[1] * e2[0]
    g1 = np.array([e2[1], -e2[0]]) / det
    g2 = np.array([-e1[1], e1[0]]) / det
    return 0.5 * det, np.array([-g1 - g2, g1, g2])


# -- batched rules over a whole mesh ------------------------------------------


@dataclass(frozen=True)
class ElementRules:
    """Flattened quadrature over many elements.

    Row ``k`` is a point in element ``elem[k]`` with barycentric coordinates
    ``bary[k]`` with respect to that element's vertices.
    """

    elem: np.ndarray
    bary: np.ndarray
    weights: np.ndarray
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def element_sums(self, n_elements: int) -> np.ndarray:
        return np.bincount(self.elem, weights=self.weights, minlength=n_elements)


def _barycentric(p: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ``pts`` in the triangle ``p``."""
    _, g = _grads_one(p)
    lam = (pts - p[0]) @ g.T
    lam[:, 0] += 1.0
    return lam


def volume_rules(mesh: BackgroundMesh, cc: CutClassification, order: int = 4) -> ElementRules:
    """Quadrature on ``Omega(mu)`` covering every active element."""
    tri = mesh.triangles
    phys = np.flatnonzero(cc.element_tag == PHYSICAL)
    bary_ref, w_ref = reference_rule(order)
    nq = len(w_ref)
    elem = [np.repeat(phys, nq)]
    bary = [np.tile(bary_ref, (len(phys), 1))]
    weights = [np.outer(mesh.areas[phys], w_ref).ravel()]
    for e in cc.cut_elements:
        p = mesh.vertices[tri[e]]
        rule = cut_volume_quadrature(p, cc.phi[tri[e]], order)
        if len(rule) == 0:
            continue
        elem.append(np.full(len(rule), e))
        bary.append(_barycentric(p, rule.points))
        weights.append(rule.weights)
    elem = np.concatenate(elem)
    bary = np.vstack(bary)
    # keep a deterministic element-major ordering
    order_idx = np.argsort(elem, kind="stable")
    elem, bary = elem[order_idx], bary[order_idx]
    weights = np.concatenate(weights)[order_idx]
    points = np.einsum("ka,kad->kd", bary, mesh.vertices[tri[elem]])
    return ElementRules(elem, bary, weights, points)


def interface_rules(mesh: BackgroundMesh, cc: CutClassification, order: int = 3) -> ElementRules:
    """Interface quadrature over every cut element, with unit normals."""
    tri = mesh.triangles
    elem, bary, weights, normals = [], [], [], []
    for e in cc.cut_elements:
        p = mesh.vertices[tri[e]]
        rule = interface_quadrature(p, cc.phi[tri[e]], order)
        if len(rule) == 0:
            continue
        elem.append(np.full(len(rule), e))
        bary.append(_barycentric(p, rule.points))
        weights.append(rule.weights)
        normals.append(rule.normals)
    if not elem:
        z = np.zeros((0, 2))
        return ElementRules(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros(0), z, z)
    elem = np.concatenate(elem)
    bary = np.vstack(bary)
    points = np.einsum("ka,kad->kd", bary, mesh.vertices[tri[elem]])
    return ElementRules(elem, bary, np.concatenate(weights), points, np.vstack(normals))
