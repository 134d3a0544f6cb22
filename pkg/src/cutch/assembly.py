"""Sparse assembly of the CutFEM operators for one geometry.

All matrices live on the full background vertex numbering; rows and columns
of vertices outside the active mesh are structurally zero.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from . import cutgeom
from .cutgeom import CutClassification, ElementRules, LevelSet
from .mesh import BackgroundMesh

BoundaryData = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def _scatter(mesh: BackgroundMesh, elems: np.ndarray, local: np.ndarray) -> sp.csr_matrix:
    """Sum 3x3 element matrices ``local`` into a global CSR matrix."""
    dofs = mesh.triangles[elems]
    rows = np.repeat(dofs, 3, axis=1).ravel()
    cols = np.tile(dofs, (1, 3)).ravel()
    N = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(N, N)).tocsr()


def _symmetrize(M: sp.csr_matrix) -> sp.csr_matrix:
    return ((M + M.T) * 0.5).tocsr()


def assemble_mass(mesh: BackgroundMesh, rules: ElementRules) -> sp.csr_matrix:
    """``A_ij = int_Omega psi_i psi_j`` from a volume rule."""
    local = np.einsum("k,ka,kb->kab", rules.weights, rules.bary, rules.bary)
    return _symmetrize(_scatter(mesh, rules.elem, local))


def assemble_stiffness(mesh: BackgroundMesh, rules: ElementRules) -> sp.csr_matrix:
    """``S_ij = int_Omega grad psi_i . grad psi_j``; gradients are elementwise constant."""
    measure = rules.element_sums(mesh.n_triangles)
    elems = np.flatnonzero(measure > 0)
    G = mesh.grads[elems]
    local = measure[elems, None, None] * np.einsum("kad,kbd->kab", G, G)
    return _symmetrize(_scatter(mesh, elems, local))


def _boundary_values(g: BoundaryData, points: np.ndarray) -> np.ndarray:
    if callable(g):
        return np.asarray(g(points[:, 0], points[:, 1]), dtype=float) * np.ones(len(points))
    return np.full(len(points), float(g))


def assemble_nitsche_neumann(
    mesh: BackgroundMesh,
    iface: ElementRules,
    alpha_n: float,
    g_n: BoundaryData = 0.0,
    h: Optional[float] = None,
):
    """Normal-derivative penalty ``J_N`` and the two boundary load vectors.

    Returns ``(J_N, b_v, b_q)`` with
    ``J_N = <alpha_N h n.grad psi_j, n.grad psi_i>``,
    ``b_v_i = <g_N, psi_i + alpha_N h n.grad psi_i>`` and ``b_q_i = <g_N, psi_i>``.
    """
    h = mesh.h if h is None else h
    N = mesh.n_vertices
    # n . grad psi_a at each point, shape (nq, 3)
    dn = np.einsum("kad,kd->ka", mesh.grads[iface.elem], iface.normals)
    local = alpha_n * h * np.einsum("k,ka,kb->kab", iface.weights, dn, dn)
    J = _symmetrize(_scatter(mesh, iface.elem, local))
    g = _boundary_values(g_n, iface.points)
    dofs = mesh.triangles[iface.elem]
    wq = (iface.weights * g)[:, None]
    b_q = np.bincount(dofs.ravel(), weights=(wq * iface.bary).ravel(), minlength=N)
    b_v = b_q + np.bincount(
        dofs.ravel(), weights=(wq * alpha_n * h * dn).ravel(), minlength=N
    )
    return J, b_v, b_q


def ghost_face_data(mesh: BackgroundMesh, faces: np.ndarray):
    """Per face: the 4 patch dofs and the scalar jump functionals.

    For face ``F = K cap K'`` with ``K = (a, b, c)`` and ``K' = (a, b, d)`` the
    patch dofs are ordered ``(a, b, c, d)``. Returns ``dofs`` (m, 4),
    ``value_jump`` (m, 4) coefficients of ``u_c - ext_K'(u)(x_c)``,
    ``value_scale`` (m,) so that the patch integral of the squared extension
    difference equals ``value_scale * (value_jump . u)^2``, and
    ``grad_jump`` (m, 4) coefficients of ``[[n_F . grad u]]``.
    """
    f = mesh.interior_faces[faces]
    va, vb, K, Kp = f[:, 0], f[:, 1], f[:, 2], f[:, 3]
    tK, tKp = mesh.triangles[K], mesh.triangles[Kp]
    vc = tK.sum(axis=1) - va - vb
    vd = tKp.sum(axis=1) - va - vb
    dofs = np.column_stack([va, vb, vc, vd])
    X = mesh.vertices

    def local_index(t, v):
        return np.argmax(t == v[:, None], axis=1)

    m = len(faces)
    rows = np.arange(m)
    gK = mesh.grads[K]
    gKp = mesh.grads[Kp]
    # barycentrics of K' evaluated at x_c (extension of K' polynomial to x_c)
    lamKp_c = np.empty((m, 3))
    for j in range(3):
        lamKp_c[:, j] = 1.0 / 3.0 + np.einsum(
            "kd,kd->k", gKp[:, j], X[vc] - X[tKp].mean(axis=1)
        )
    jump = np.zeros((m, 4))
    jump[:, 2] = 1.0
    for j in range(3):
        # scatter -lambda_j^{K'}(x_c) onto the patch slot of K' vertex j
        v = tKp[:, j]
        slot = np.where(v == va, 0, np.where(v == vb, 1, 3))
        jump[rows, slot] -= lamKp_c[:, j]
    # lambda_c^K is the K-side difference shape; its value at x_d
    ic = local_index(tK, vc)
    lamK_c_at_d = 1.0 / 3.0 + np.einsum(
        "kd,kd->k", gK[rows, ic], X[vd] - X[tK].mean(axis=1)
    )
    scale = mesh.areas[K] / 6.0 + mesh.areas[Kp] * lamK_c_at_d**2 / 6.0

    # face normal and derivative jump
    t = X[vb] - X[va]
    length = np.hypot(t[:, 0], t[:, 1])
    nF = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]
    grad_jump = np.zeros((m, 4))
    for side, (tri, g, sign) in enumerate(((tK, gK, 1.0), (tKp, gKp, -1.0))):
        for j in range(3):
            v = tri[:, j]
            slot = np.select([v == va, v == vb, v == vc, v == vd], [0, 1, 2, 3])
            grad_jump[rows, slot] += sign * np.einsum("kd,kd->k", g[:, j], nF)
    return dofs, jump, scale, grad_jump, length


def assemble_ghost_penalty(
    mesh: BackgroundMesh,
    cc: CutClassification,
    alpha_1: float,
    variant: str = "value_jump",
    h: Optional[float] = None,
    patch_scaling: Optional[float] = None,
) -> sp.csr_matrix:
    """Ghost penalty over the stabilization faces.

    ``value_jump``: ``alpha_1 h^-2 int_{K cup K'} (u_K^ext - u_K'^ext)(v_K^ext - v_K'^ext)``.
    ``derivative_jump``: ``alpha_1 h int_F [[n_F.grad u]] [[n_F.grad v]]``.
    ``patch_scaling`` overrides the ``h^-2`` factor of the value jump.
    """
    h = mesh.h if h is None else h
    N = mesh.n_vertices
    faces = cc.stab_faces
    if len(faces) == 0 or alpha_1 == 0.0:
        return sp.csr_matrix((N, N))
    dofs, jump, scale, grad_jump, length = ghost_face_data(mesh, faces)
    if variant == "value_jump":
        factor = h**-2 if patch_scaling is None else patch_scaling
        local = (alpha_1 * factor * scale)[:, None, None] * np.einsum("ka,kb->kab", jump, jump)
    elif variant == "derivative_jump":
        local = (alpha_1 * h * length)[:, None, None] * np.einsum(
            "ka,kb->kab", grad_jump, grad_jump
        )
    else:
        raise ValueError(f"unknown ghost penalty variant {variant!r}")
    rows = np.repeat(dofs, 4, axis=1).ravel()
    cols = np.tile(dofs, (1, 4)).ravel()
    K = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(N, N)).tocsr()
    return _symmetrize(K)


def assemble_dirichlet_nitsche(
    mesh: BackgroundMesh,
    iface: ElementRules,
    alpha_d: float,
    eps: float,
    g_d: BoundaryData = 0.0,
    h: Optional[float] = None,
):
    """Symmetric Nitsche blocks for homogeneous Dirichlet data on the interface.

    Returns ``(D_u, D_w, loads)`` where ``D_w`` is
    ``-<n.grad psi_j, psi_i> - <psi_j, n.grad psi_i> + (alpha_D/h) <psi_j, psi_i>``,
    ``D_u = eps^2 D_w`` and ``loads`` is a pair of zero vectors.
    """
    if callable(g_d) or float(g_d) != 0.0:
        raise ValueError("only homogeneous Dirichlet data is supported")
    h = mesh.h if h is None else h
    N = mesh.n_vertices
    dn = np.einsum("kad,kd->ka", mesh.grads[iface.elem], iface.normals)
    w = iface.weights
    consistency = np.einsum("k,ka,kb->kab", w, iface.bary, dn)
    penalty = np.einsum("k,ka,kb->kab", w, iface.bary, iface.bary)
    local = -consistency - np.transpose(consistency, (0, 2, 1)) + (alpha_d / h) * penalty
    D = _symmetrize(_scatter(mesh, iface.elem, local))
    zero = np.zeros(N)
    return eps**2 * D, D, (zero, zero.copy())


def dpotential(u, gamma):
    """``F'(u) = g2 u^3 + g1 u^2 + g0 u`` with ``gamma = (g0, g1, g2)``."""
    g0, g1, g2 = gamma
    return ((g2 * u + g1) * u + g0) * u


def potential(u, gamma):
    g0, g1, g2 = gamma
    return ((g2 * u / 4.0 + g1 / 3.0) * u + g0 / 2.0) * u * u


def evaluation_matrix(mesh: BackgroundMesh, rules: ElementRules) -> sp.csr_matrix:
    """Sparse map from vertex coefficients to values at the quadrature points."""
    nq = len(rules.weights)
    rows = np.repeat(np.arange(nq), 3)
    cols = mesh.triangles[rules.elem].ravel()
    return sp.csr_matrix((rules.bary.ravel(), (rows, cols)), shape=(nq, mesh.n_vertices))


def assemble_nonlinear_load(u, E: sp.csr_matrix, weights: np.ndarray, gamma, eps: float):
    """``N_i = eps^-2 int_Omega F'(u) psi_i`` using a precomputed evaluation matrix."""
    uq = E @ u
    return E.T @ (weights * dpotential(uq, gamma)) / eps**2


@dataclass
class OperatorSet:
    """All assembled blocks for one geometry (one parameter value, one time)."""

    A: sp.csr_matrix
    S: sp.csr_matrix
    J_N: sp.csr_matrix
    K_g: sp.csr_matrix
    K_gw: sp.csr_matrix
    D_u: Optional[sp.csr_matrix]
    D_w: Optional[sp.csr_matrix]
    b_v: np.ndarray
    b_q: np.ndarray
    classification: CutClassification
    rules: ElementRules
    E: sp.csr_matrix = field(repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def active_dofs(self) -> np.ndarray:
        return self.classification.active_dofs

    def nonlinear_load(self, u, gamma, eps) -> np.ndarray:
        return assemble_nonlinear_load(u, self.E, self.rules.weights, gamma, eps)


def assemble_operators(mesh: BackgroundMesh, ls: LevelSet, t: float, cfg) -> OperatorSet:
    """Assemble every block needed by one IMEX step.

    ``cfg`` provides ``bc``, ``alpha_n``, ``alpha_1``, ``alpha_d``, ``eps``,
    ``gp_variant``, ``gp_on_w``, ``g_n`` and the quadrature orders.
    """
    cc = cutgeom.classify(mesh, ls, t)
    rules = cutgeom.volume_rules(mesh, cc, cfg.volume_order)
    iface = cutgeom.interface_rules(mesh, cc, cfg.interface_order)
    A = assemble_mass(mesh, rules)
    S = assemble_stiffness(mesh, rules)
    K_g = assemble_ghost_penalty(mesh, cc, cfg.alpha_1, cfg.gp_variant)
    N = mesh.n_vertices
    if cfg.gp_on_w:
        # mass-level scaling matches the -A block the w penalty is added to
        K_gw = assemble_ghost_penalty(mesh, cc, cfg.alpha_1, "value_jump", patch_scaling=1.0)
    else:
        K_gw = sp.csr_matrix((N, N))
    if cfg.bc == "neumann":
        J_N, b_v, b_q = assemble_nitsche_neumann(mesh, iface, cfg.alpha_n, cfg.g_n)
        D_u = D_w = None
    elif cfg.bc == "dirichlet_embedded":
        J_N = sp.csr_matrix((N, N))
        D_u, D_w, (b_v, b_q) = assemble_dirichlet_nitsche(mesh, iface, cfg.alpha_d, cfg.eps)
    else:
        raise ValueError(f"unknown boundary condition mode {cfg.bc!r}")
    E = evaluation_matrix(mesh, rules)
    return OperatorSet(
        A=A, S=S, J_N=J_N, K_g=K_g, K_gw=K_gw, D_u=D_u, D_w=D_w,
        b_v=b_v, b_q=b_q, classification=cc, rules=rules, E=E,
        meta={"t": t, "bc": cfg.bc, "gp_variant": cfg.gp_variant, "level_set": ls},
    )
