import logging
import struct

import numpy as np
import pytest
import scipy.linalg as la
import scipy.sparse as sp

from cutch import assembly, fom, rom
from cutch.cutgeom import LevelSet
from cutch.fom import FomConfig
from cutch.mesh import build_background_mesh


def _snapshots(n_rows, n_cols, seed=0, decay=0.7):
    """Random full-rank data with a geometric singular spectrum."""
    rng = np.random.default_rng(seed)
    k = min(n_rows, n_cols)
    U, _ = np.linalg.qr(rng.normal(size=(n_rows, k)))
    V, _ = np.linalg.qr(rng.normal(size=(n_cols, k)))
    return U @ np.diag(decay ** np.arange(k)) @ V.T


def _svd_oracle(data, M, r):
    L = np.linalg.cholesky(M.toarray())
    U, s, _ = np.linalg.svd(L.T @ data, full_matrices=False)
    return L, U[:, :r], s**2 / data.shape[1]


# -- files -------------------------------------------------------------------


def test_matrix_file_layout(tmp_path):
    data = np.arange(6, dtype=float).reshape(2, 3)
    path = tmp_path / "m.chsnap"
    rom.write_matrix(path, data)
    raw = path.read_bytes()
    assert raw[:8] == b"CHSNAP1\0"
    assert struct.unpack("<II", raw[8:16]) == (2, 3)
    # column-major little-endian doubles
    assert list(struct.unpack("<6d", raw[16:])) == [0.0, 3.0, 1.0, 4.0, 2.0, 5.0]
    assert np.array_equal(rom.read_matrix(path), data)


def test_matrix_file_errors(tmp_path):
    bad = tmp_path / "bad.chsnap"
    bad.write_bytes(b"NOTSNAP!" + struct.pack("<II", 1, 1) + b"\0" * 8)
    with pytest.raises(ValueError):
        rom.read_matrix(bad)
    short = tmp_path / "short.chsnap"
    short.write_bytes(b"CHSNAP1\0" + struct.pack("<II", 2, 2) + b"\0" * 8)
    with pytest.raises(ValueError):
        rom.read_matrix(short)


def test_snapshot_and_basis_round_trip(tmp_path):
    S = rom.SnapshotMatrix(_snapshots(7, 4), [0.4, 0.4, 0.41, 0.41], [1, 2, 1, 2], "w")
    rom.write_snapshots(tmp_path / "s.chsnap", S)
    back = rom.read_snapshots(tmp_path / "s.chsnap")
    assert np.array_equal(back.data, S.data)
    assert back.params == S.params and back.steps == S.steps and back.field == "w"
    basis = rom.pod(S.data, None, inner_product="euclidean")
    rom.write_basis(tmp_path / "b.chsnap", basis)
    bb = rom.read_basis(tmp_path / "b.chsnap")
    assert np.array_equal(bb.modes, basis.modes)
    assert np.allclose(bb.eigenvalues, basis.eigenvalues)
    assert bb.inner_product == "euclidean"


# -- snapshots ---------------------------------------------------------------


def test_snapshot_counting():
    mesh = build_background_mesh(6)
    cfg = FomConfig(n=6, n_steps=3)
    u0 = fom.initial_pseudorandom(0, mesh)
    S_u, S_w, t = rom.collect_snapshots(cfg, [0.4], u0, mesh, [2], [2])
    ref = fom.run_fom(cfg.with_(geometry=LevelSet.circle(0.4)), u0, mesh)
    assert S_u.n_snapshots == 1 and np.array_equal(S_u.data[:, 0], ref.states[2].u)
    assert np.array_equal(S_w.data[:, 0], ref.states[2].w)
    S_u, S_w, t = rom.collect_snapshots(cfg, [0.38, 0.4, 0.45], u0, mesh)
    assert S_u.n_snapshots == 3 * 4 and S_w.n_snapshots == 3 * 3
    assert S_u.params[:4] == [0.38] * 4 and S_u.steps[:4] == [0, 1, 2, 3]
    assert len(t) == 3
    assert rom.default_record_steps(2) == ([0, 1, 2], [1, 2])


def test_parallel_collection_keeps_column_order():
    mesh = build_background_mesh(6)
    cfg = FomConfig(n=6, n_steps=2)
    u0 = fom.initial_pseudorandom(0, mesh)
    serial, _, _ = rom.collect_snapshots(cfg, [0.38, 0.45, 0.4], u0, mesh)
    pooled, _, _ = rom.collect_snapshots(cfg, [0.38, 0.45, 0.4], u0, mesh, workers=2)
    assert np.array_equal(serial.data, pooled.data)
    assert pooled.params == serial.params


# -- POD ---------------------------------------------------------------------


@pytest.mark.parametrize("n", [6, 10])  # 49 rows (dual form) and 121 rows
def test_pod_matches_weighted_svd(n):
    mesh = build_background_mesh(n)
    M = rom.background_mass(mesh)
    data = _snapshots(mesh.n_vertices, 50, seed=n)
    r = 12
    basis = rom.pod(data, M, r)
    L, U, lam = _svd_oracle(data, M, r)
    angles = la.subspace_angles(L.T @ basis.modes, U)
    assert np.max(angles) <= 1e-8
    G = basis.modes.T @ (M @ basis.modes)
    assert np.abs(G - np.eye(r)).max() <= 1e-10
    assert np.allclose(basis.eigenvalues[: len(lam)], lam[: len(basis.eigenvalues)], rtol=1e-8)
    discarded = basis.eigenvalues[r:].sum()
    assert rom.reconstruction_error(data, basis, M) == pytest.approx(discarded, rel=1e-8)


def test_pod_small_cases():
    s = np.array([3.0, 4.0, 0.0])
    b = rom.pod(s[:, None], None, inner_product="euclidean")
    assert b.n_modes == 1 and np.allclose(np.abs(b.modes[:, 0]), s / 5.0)
    two = np.array([[2.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    b = rom.pod(two, None, inner_product="euclidean")
    assert b.n_modes == 2 and b.eigenvalues[0] == pytest.approx(b.eigenvalues[1])
    with pytest.raises(ValueError):
        rom.pod(np.zeros((4, 2)), None, inner_product="euclidean")
    with pytest.raises(ValueError):
        rom.pod(two, None, inner_product="sobolev")


def test_pod_clamps_to_numerical_rank(caplog):
    rng = np.random.default_rng(1)
    data = rng.normal(size=(20, 3)) @ rng.normal(size=(3, 8))
    with caplog.at_level(logging.WARNING, logger="cutch.rom"):
        b = rom.pod(data, None, n_modes=6, inner_product="euclidean")
    assert b.n_modes == 3
    assert "clamping" in caplog.text


# -- projection --------------------------------------------------------------


@pytest.fixture(scope="module")
def geometry():
    mesh = build_background_mesh(12)
    cfg = FomConfig(geometry=LevelSet.circle(0.42), n=12, n_steps=20)
    ops = assembly.assemble_operators(mesh, cfg.geometry, 0.0, cfg)
    return mesh, cfg, ops


def test_project_initial(geometry):
    mesh, cfg, ops = geometry
    A = ops.A + rom.inactive_mass(ops, rom.lumped_background_mass(mesh))
    rng = np.random.default_rng(2)
    B = rom.orthonormalize(rng.normal(size=(mesh.n_vertices, 6)), A)
    a = rng.normal(size=6)
    assert np.allclose(B @ rom.project_initial(B @ a, B, A), B @ a, atol=1e-10)
    u0 = rng.normal(size=mesh.n_vertices)
    a0 = rom.project_initial(u0, B, A)
    assert np.abs(B.T @ (A @ (u0 - B @ a0))).max() <= 1e-10
    orth = u0 - B @ a0
    assert np.abs(rom.project_initial(orth, B, A)).max() <= 1e-10


def test_coordinate_projection(geometry):
    mesh, cfg, ops = geometry
    i = int(ops.active_dofs[len(ops.active_dofs) // 2])
    e = np.zeros((mesh.n_vertices, 1))
    e[i] = 1.0
    ro = rom.project_operators(e, e, ops, cfg)
    tau, eps, s = cfg.tau, cfg.eps, cfg.stabilization
    M11 = ops.A + tau * ops.J_N + tau * ops.K_g + (s * tau / eps**2) * ops.S
    expected = np.array([
        [M11[i, i], tau * ops.S[i, i]],
        [eps**2 * ops.S[i, i], -(ops.A[i, i] + ops.K_gw[i, i])],
    ])
    assert np.allclose(ro.lhs, expected, rtol=1e-14)
    with pytest.raises(ValueError):
        rom.project_operators(e[:-1], e, ops, cfg)


def test_reduced_mass_is_spd(geometry):
    mesh, cfg, ops = geometry
    B = rom.orthonormalize(np.random.default_rng(3).normal(size=(mesh.n_vertices, 5)))
    G = B.T @ (ops.A @ B)
    assert np.allclose(G, G.T) and np.linalg.eigvalsh(G).min() > 0


@pytest.mark.parametrize("bc", ["neumann", "dirichlet_embedded"])
def test_identity_basis_reproduces_one_full_step(bc):
    mesh = build_background_mesh(10)
    cfg = FomConfig(geometry=LevelSet.circle(0.43), n=10, bc=bc)
    ops = assembly.assemble_operators(mesh, cfg.geometry, 0.0, cfg)
    u0 = np.where(ops.classification.active_mask, fom.initial_pseudorandom(5, mesh), 0.0)
    full = fom.imex_step(fom.State(u0, np.zeros_like(u0), 0, cfg.tau), ops, cfg)
    I = np.eye(mesh.n_vertices)
    ro = rom.project_operators(I, I, ops, cfg, rom.lumped_background_mass(mesh))
    a, b = rom.rom_step(u0, ro, cfg)
    assert np.abs(a - full.u).max() <= 1e-10 * max(1.0, np.abs(full.u).max())
    assert np.abs(b - full.w).max() <= 1e-10 * max(1.0, np.abs(full.w).max())


def test_zero_coefficients_stay_zero(geometry):
    mesh, cfg, ops = geometry
    B = rom.orthonormalize(np.random.default_rng(4).normal(size=(mesh.n_vertices, 4)), ops.A)
    ro = rom.project_operators(B, B, ops, cfg)
    a, b = rom.rom_step(np.zeros(4), ro, cfg)
    assert not a.any() and not b.any()


def _errors(fcfg, bu, bw, u0, mesh):
    ref = fom.run_fom(fcfg, u0, mesh)
    res = rom.run_rom(fcfg, bu, bw, u0, mesh)
    U = [s.u for s in ref.states]
    W = [s.w for s in ref.states]
    steps = range(1, fcfg.n_steps + 1)
    _, eu = rom.relative_error(U, [res.u(k) for k in range(len(U))], ref.operators.A, steps)
    _, ew = rom.relative_error(W, [res.w(k) for k in range(len(W))], ref.operators.A, steps)
    return eu, ew


def _span_basis(data, M):
    # untruncated M-orthonormal basis of the snapshot columns
    L = np.linalg.cholesky(M.toarray())
    Q, _ = np.linalg.qr(L.T @ data)
    return rom.PodBasis(la.solve_triangular(L.T, Q, lower=False), np.ones(Q.shape[1]))


def test_exact_span_reproduces_full_solve(geometry):
    mesh, cfg, _ = geometry
    u0 = fom.initial_pseudorandom(6, mesh)
    S_u, S_w, _ = rom.collect_snapshots(cfg, [0.42], u0, mesh)
    M = rom.background_mass(mesh)
    eu, ew = _errors(cfg.with_(geometry=LevelSet.circle(0.42)), _span_basis(S_u.data, M),
                     _span_basis(S_w.data, M), u0, mesh)
    assert eu <= 1e-8 and ew <= 1e-8


def test_full_rank_pod_at_a_training_parameter(geometry):
    mesh, cfg, _ = geometry
    u0 = fom.initial_pseudorandom(6, mesh)
    S_u, S_w, _ = rom.collect_snapshots(cfg, [0.38, 0.42, 0.46], u0, mesh)
    M = rom.background_mass(mesh)
    eu, ew = _errors(cfg.with_(geometry=LevelSet.circle(0.42)), rom.pod(S_u, M), rom.pod(S_w, M), u0, mesh)
    assert eu <= 1e-6 and ew <= 1e-6


def test_relative_error_conventions():
    A = sp.identity(3, format="csr")
    traj = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 2.0, 0.0]), np.zeros(3)]
    errs, mean = rom.relative_error(traj, traj, A)
    assert mean == 0.0
    doubled = [2 * t for t in traj]
    errs, mean = rom.relative_error(traj, doubled, A, steps=[0, 1])
    assert np.allclose(errs, [1.0, 1.0]) and mean == pytest.approx(1.0)
    # below the floor the absolute error is reported
    errs, _ = rom.relative_error(traj, [t + 1e-3 for t in traj], [A, A, A], steps=[2])
    assert errs[0] == pytest.approx(np.sqrt(3) * 1e-3)


def test_inactive_mass_is_zero_on_active_dofs(geometry):
    mesh, cfg, ops = geometry
    lumped = rom.lumped_background_mass(mesh)
    d = rom.inactive_mass(ops, lumped).diagonal()
    act = ops.classification.active_mask
    assert np.all(d[act] == 0) and np.all(d[~act] > 0)
    assert lumped.sum() == pytest.approx(1.0)
