"""Assembled single-element and two-element blocks against dense oracles.

Each function returns the largest entry mismatch per block, divided by
``max(1, largest oracle entry)`` so that thin random elements with large
gradients are judged at the same relative precision as unit-sized ones.
"""

import numpy as np

from cutch import assembly, cutgeom
from cutch.cutgeom import CUT, PHYSICAL, CutClassification
from cutch.mesh import BackgroundMesh, triangle_gradients

from oracles import (
    barycentric_functions,
    ccw,
    corner_split,
    integrate_negative_part,
    integrate_segment,
    integrate_triangle,
    linear_coefficients,
)

H = 0.3


def _mesh(vertices, triangles, faces):
    areas, grads = triangle_gradients(vertices[triangles])
    return BackgroundMesh(
        n=1,
        vertices=vertices,
        triangles=np.asarray(triangles, dtype=np.int64),
        interior_faces=np.asarray(faces, dtype=np.int64).reshape(-1, 4),
        boundary_faces=np.zeros((0, 3), dtype=np.int64),
        h=H,
        areas=areas,
        grads=grads,
    )


def _classification(tags, phi, n_vertices, stab=()):
    tags = np.asarray(tags, dtype=np.int8)
    return CutClassification(
        element_tag=tags,
        phi=np.asarray(phi, dtype=float),
        active_elements=np.flatnonzero(tags != 2),
        cut_elements=np.flatnonzero(tags == CUT),
        stab_faces=np.asarray(stab, dtype=np.int64),
        active_dofs=np.arange(n_vertices),
        active_mask=np.ones(n_vertices, dtype=bool),
    )


def _mismatch(got, ref):
    got = got.toarray() if hasattr(got, "toarray") else np.asarray(got)
    ref = np.asarray(ref)
    return float(np.max(np.abs(got - ref)) / max(1.0, float(np.max(np.abs(ref)))))


def element_block_errors(p, phi, u, gamma, eps=0.01, alpha_n=10.0, alpha_d=10.0):
    """Mass, stiffness, nonlinear load, Nitsche-Neumann and Dirichlet blocks of one element."""
    p = np.asarray(p, dtype=float)
    mesh = _mesh(p, [[0, 1, 2]], [])
    tag = PHYSICAL if np.all(phi < 0) else CUT
    cc = _classification([tag], phi, 3)
    vol = cutgeom.volume_rules(mesh, cc, 4)
    iface = cutgeom.interface_rules(mesh, cc, 3)
    lam, grads = barycentric_functions(p)
    cut = tag == CUT

    def over_domain(f):
        return integrate_negative_part(f, p, phi) if cut else integrate_triangle(f, p)

    def stack(fs):
        return lambda x, y: np.stack([f(x, y) for f in fs], axis=-1)

    hats = stack(lam)
    mass_ref = over_domain(lambda x, y: hats(x, y)[:, :, None] * hats(x, y)[:, None, :])
    area = over_domain(lambda x, y: np.ones_like(x))
    stiff_ref = area * grads @ grads.T
    g0, g1, g2 = gamma

    def dF(v):
        return g2 * v**3 + g1 * v**2 + g0 * v

    uh = lambda x, y: hats(x, y) @ u
    nl_ref = over_domain(lambda x, y: dF(uh(x, y))[:, None] * hats(x, y)) / eps**2

    errors = {
        "mass": _mismatch(assembly.assemble_mass(mesh, vol), mass_ref),
        "stiffness": _mismatch(assembly.assemble_stiffness(mesh, vol), stiff_ref),
        "nonlinear": _mismatch(
            assembly.assemble_nonlinear_load(u, assembly.evaluation_matrix(mesh, vol), vol.weights, gamma, eps),
            nl_ref,
        ),
    }
    if not cut:
        return errors

    _, _, a, b = corner_split(p, phi)
    c = linear_coefficients(p, phi)
    normal = c[1:] / np.linalg.norm(c[1:])
    dn = grads @ normal

    def seg(f):
        return integrate_segment(f, a, b)

    g_n = lambda x, y: 1.0 + x - 2.0 * y
    jn_ref = alpha_n * H * seg(lambda x, y: np.ones_like(x)[:, None, None] * np.outer(dn, dn))
    bq_ref = seg(lambda x, y: g_n(x, y)[:, None] * hats(x, y))
    bv_ref = bq_ref + alpha_n * H * seg(lambda x, y: g_n(x, y)[:, None] * dn[None, :])
    J, b_v, b_q = assembly.assemble_nitsche_neumann(mesh, iface, alpha_n, g_n)
    errors["nitsche_neumann"] = _mismatch(J, jn_ref)
    errors["neumann_loads"] = max(_mismatch(b_v, bv_ref), _mismatch(b_q, bq_ref))

    # row i = test function psi_i, column j = trial psi_j
    cons = seg(lambda x, y: hats(x, y)[:, :, None] * dn[None, None, :])
    pen = seg(lambda x, y: hats(x, y)[:, :, None] * hats(x, y)[:, None, :])
    dw_ref = -cons - cons.T + (alpha_d / H) * pen
    D_u, D_w, _ = assembly.assemble_dirichlet_nitsche(mesh, iface, alpha_d, eps)
    errors["dirichlet"] = max(_mismatch(D_w, dw_ref), _mismatch(D_u, eps**2 * dw_ref))
    return errors


def patch_block_errors(pa, pb, pc, pd, alpha_1=1e-3):
    """Both ghost penalty variants on the patch ``(a, b, c) cup (a, b, d)``."""
    X = np.array([pa, pb, pc, pd], dtype=float)
    tK = [0, 1, 2]
    tKp = [0, 1, 3]
    _, perm = ccw(X[tK])
    tK = [tK[i] for i in perm]
    _, perm = ccw(X[tKp])
    tKp = [tKp[i] for i in perm]
    mesh = _mesh(X, [tK, tKp], [[0, 1, 0, 1]])
    cc = _classification([CUT, CUT], -np.ones(4), 4, stab=[0])

    # extension of the K and K' interpolants of every unit vector to the patch
    coef = []
    for i in range(4):
        e = np.eye(4)[i]
        coef.append(linear_coefficients(X[tK], e[tK]) - linear_coefficients(X[tKp], e[tKp]))
    coef = np.array(coef)

    def diffs(x, y):
        return coef[:, 0][None, :] + np.outer(x, coef[:, 1]) + np.outer(y, coef[:, 2])

    def gram(x, y):
        d = diffs(x, y)
        return d[:, :, None] * d[:, None, :]

    value_ref = alpha_1 * H**-2 * (integrate_triangle(gram, X[tK]) + integrate_triangle(gram, X[tKp]))
    t = X[1] - X[0]
    length = np.hypot(*t)
    nF = np.array([t[1], -t[0]]) / length
    jump = coef[:, 1:] @ nF
    deriv_ref = alpha_1 * H * length * np.outer(jump, jump)
    return {
        "ghost_value_jump": _mismatch(
            assembly.assemble_ghost_penalty(mesh, cc, alpha_1, "value_jump"), value_ref
        ),
        "ghost_derivative_jump": _mismatch(
            assembly.assemble_ghost_penalty(mesh, cc, alpha_1, "derivative_jump"), deriv_ref
        ),
    }


def random_element(rng):
    """Well-shaped random triangle with a sign-changing level set."""
    while True:
        p = rng.uniform(-1, 1, size=(3, 2))
        p, _ = ccw(p)
        e1, e2 = p[1] - p[0], p[2] - p[0]
        if abs(e1[0] * e2[1] - e1[1] * e2[0]) < 0.05:
            continue
        phi = rng.uniform(-1, 1, size=3)
        if (phi < 0).any() and (phi > 0).any() and np.all(np.abs(phi) > 1e-4):
            return p, phi


def random_patch(rng):
    while True:
        a, b = rng.uniform(-1, 1, size=(2, 2))
        if np.hypot(*(b - a)) < 0.2:
            continue
        t = (b - a) / np.hypot(*(b - a))
        nrm = np.array([-t[1], t[0]])
        c = a + rng.uniform(0.1, 0.9) * (b - a) + rng.uniform(0.2, 1.0) * nrm
        d = a + rng.uniform(0.1, 0.9) * (b - a) - rng.uniform(0.2, 1.0) * nrm
        return a, b, c, d
