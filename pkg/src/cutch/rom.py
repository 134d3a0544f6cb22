"""POD bases and the Galerkin-projected IMEX reduced model."""

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from . import assembly, cutgeom
from .assembly import OperatorSet
from .cutgeom import LevelSet
from .fom import FomConfig, run_fom, step_time
from .mesh import BackgroundMesh

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"CHSNAP1\0"
EIG_CUTOFF = 1e-14


@dataclass
class SnapshotMatrix:
    data: np.ndarray  # (N_h, N_s)
    params: list  # one parameter value per column
    steps: list  # one time index per column
    field: str = "u"

    @property
    def n_snapshots(self) -> int:
        return self.data.shape[1]

    def meta(self) -> dict:
        return {
            "field": self.field,
            "rows": int(self.data.shape[0]),
            "cols": int(self.data.shape[1]),
            "columns": [{"mu": float(m), "step": int(k)} for m, k in zip(self.params, self.steps)],
        }


def write_matrix(path, data: np.ndarray) -> None:
    """Binary matrix file: magic, u32 rows, u32 cols, f64 column-major (LE)."""
    data = np.asarray(data, dtype="<f8")
    rows, cols = data.shape
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(struct.pack("<II", rows, cols))
        f.write(np.asfortranarray(data).tobytes(order="F"))


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a snapshot file (magic {magic!r})")
        rows, cols = struct.unpack("<II", f.read(8))
        buf = f.read()
    if len(buf) != 8 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} doubles, got {len(buf)} bytes")
    return np.frombuffer(buf, dtype="<f8").reshape((rows, cols), order="F").copy()


def write_snapshots(path, S: SnapshotMatrix) -> None:
    write_matrix(path, S.data)
    with open(str(path) + ".json", "w") as f:
        json.dump(S.meta(), f, indent=1)


def read_snapshots(path) -> SnapshotMatrix:
    data = read_matrix(path)
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    cols = meta["columns"]
    return SnapshotMatrix(
        data, [c["mu"] for c in cols], [c["step"] for c in cols], meta.get("field", "u")
    )


def default_record_steps(n_steps: int):
    """u is recorded from the initial state on; w has no initial value."""
    return list(range(0, n_steps + 1)), list(range(1, n_steps + 1))


def _snapshot_run(job):
    cfg, u0, mesh, steps = job
    res = run_fom(cfg, u0, mesh, record_steps=steps, keep_states=False, diagnostics=False)
    return res.snapshots_u, res.snapshots_w, res.wall_seconds


def collect_snapshots(
    cfg: FomConfig,
    train_params: Sequence[float],
    u0: np.ndarray,
    mesh: BackgroundMesh,
    record_steps=None,
    record_steps_w=None,
    geometry_of=LevelSet.circle,
    workers: int = 1,
):
    """One FOM run per training parameter; zero-extended states become columns.

    With ``workers > 1`` the runs fan out over a process pool; columns are
    still ordered by training parameter.
    """
    if record_steps is None:
        record_steps, default_w = default_record_steps(cfg.n_steps)
        record_steps_w = default_w if record_steps_w is None else record_steps_w
    if record_steps_w is None:
        record_steps_w = record_steps
    steps = set(record_steps) | set(record_steps_w)
    jobs = [(cfg.with_(geometry=geometry_of(mu)), u0, mesh, steps) for mu in train_params]

    def fail(mu, exc):
        return RuntimeError(f"FOM failed for mu={mu}: {exc}")

    results = []
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_snapshot_run, job) for job in jobs]
            for mu, fut in zip(train_params, futures):
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise fail(mu, exc) from exc
    else:
        for mu, job in zip(train_params, jobs):
            try:
                results.append(_snapshot_run(job))
            except Exception as exc:
                raise fail(mu, exc) from exc

    cols_u, cols_w = [], []
    pu, ku, pw, kw = [], [], [], []
    for mu, (su, sw, _) in zip(train_params, results):
        for k in record_steps:
            cols_u.append(su[k])
            pu.append(mu)
            ku.append(k)
        for k in record_steps_w:
            cols_w.append(sw[k])
            pw.append(mu)
            kw.append(k)
    S_u = SnapshotMatrix(np.column_stack(cols_u), pu, ku, "u")
    S_w = SnapshotMatrix(np.column_stack(cols_w), pw, kw, "w")
    return S_u, S_w, np.array([r[2] for r in results])


@dataclass
class PodBasis:
    modes: np.ndarray  # (N_h, N_r)
    eigenvalues: np.ndarray  # full retained spectrum, descending
    inner_product: str = "mass_weighted"

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]

    def truncate(self, r: int) -> "PodBasis":
        return PodBasis(self.modes[:, :r], self.eigenvalues, self.inner_product)


def write_basis(path, basis: PodBasis) -> None:
    """Modes as a CHSNAP1 matrix; the eigenvalues go to the JSON sidecar."""
    write_matrix(path, basis.modes)
    meta = {
        "field": "basis",
        "rows": int(basis.modes.shape[0]),
        "cols": int(basis.n_modes),
        "inner_product": basis.inner_product,
        "eigenvalues": [float(v) for v in basis.eigenvalues],
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(meta, f, indent=1)


def read_basis(path) -> PodBasis:
    modes = read_matrix(path)
    with open(str(path) + ".json") as f:
        meta = json.load(f)
    return PodBasis(modes, np.array(meta["eigenvalues"]), meta.get("inner_product", "mass_weighted"))


def _gram_matrix(M, inner_product):
    if inner_product == "mass_weighted":
        return M
    if inner_product == "euclidean":
        return None
    raise ValueError(f"unknown inner product {inner_product!r}")


def _inner(X, Y, M):
    return X.T @ (Y if M is None else M @ Y)


def orthonormalize(Phi: np.ndarray, M=None, passes: int = 2) -> np.ndarray:
    """Cholesky-QR in the ``M`` inner product (order preserving)."""
    for _ in range(passes):
        G = _inner(Phi, Phi, M)
        G = 0.5 * (G + G.T)
        R = la.cholesky(G, lower=False)
        Phi = la.solve_triangular(R, Phi.T, trans="T", lower=False).T
    return Phi


def _fix_signs(Phi):
    idx = np.argmax(np.abs(Phi), axis=0)
    s = np.sign(Phi[idx, np.arange(Phi.shape[1])])
    s[s == 0] = 1.0
    return Phi * s


def pod(S, M=None, n_modes: Optional[int] = None, inner_product: str = "mass_weighted") -> PodBasis:
    """POD of a snapshot set via the correlation-matrix eigenproblem.

    ``C_ij = (u_i, u_j) / N_s`` in the chosen inner product. When there are
    more snapshots than rows, the equivalent N_h x N_h problem is solved.
    Modes with ``lambda_i / lambda_1 < 1e-14`` are discarded and a request for
    more modes than remain is clamped with a warning.
    """
    data = S.data if isinstance(S, SnapshotMatrix) else np.asarray(S, dtype=float)
    Nh, Ns = data.shape
    G = _gram_matrix(M, inner_product)
    if not np.any(data):
        raise ValueError("snapshot matrix is identically zero")

    if Ns <= Nh:
        C = _inner(data, data, G) / Ns
        C = 0.5 * (C + C.T)
        lam, Q = la.eigh(C)
        lam, Q = lam[::-1], Q[:, ::-1]
        keep = lam > EIG_CUTOFF * lam[0]
        lam, Q = lam[keep], Q[:, keep]
        Phi = data @ Q / (Ns * np.sqrt(lam))
    else:
        # same nonzero spectrum: L^T S S^T L / N_s with G = L L^T
        if G is None:
            L = None
            K = data @ data.T / Ns
        else:
            L = np.linalg.cholesky(G.toarray() if sp.issparse(G) else G)
            LS = L.T @ data
            K = LS @ LS.T / Ns
        K = 0.5 * (K + K.T)
        lam, V = la.eigh(K)
        lam, V = lam[::-1], V[:, ::-1]
        keep = lam > EIG_CUTOFF * lam[0]
        lam, V = lam[keep], V[:, keep]
        Phi = V if L is None else la.solve_triangular(L.T, V, lower=False)

    if n_modes is None:
        n_modes = len(lam)
    if n_modes < 1:
        raise ValueError("need at least one mode")
    if n_modes > len(lam):
        log.warning("requested %d modes but numerical rank is %d; clamping", n_modes, len(lam))
        n_modes = len(lam)
    Phi = orthonormalize(Phi[:, :n_modes], G)
    return PodBasis(_fix_signs(Phi), lam, inner_product)


def reconstruction_error(data: np.ndarray, basis: PodBasis, M=None) -> float:
    """Mean squared projection error of the snapshot columns."""
    G = _gram_matrix(M, basis.inner_product)
    B = basis.modes
    coeff = _inner(B, data, G)
    R = data - B @ coeff
    return float(np.sum(R * (R if G is None else G @ R)) / data.shape[1])


@dataclass
class ReducedOperators:
    lhs: np.ndarray
    rhs_u: np.ndarray  # B_u^T (A + s tau/eps^2 K) B_u, applied to a^n
    load_v: np.ndarray
    load_q: np.ndarray
    Bu: np.ndarray = field(repr=False)
    Bw: np.ndarray = field(repr=False)
    ops: OperatorSet = field(repr=False)


def inactive_mass(ops: OperatorSet, lumped: np.ndarray) -> sp.dia_matrix:
    """Diagonal weights enforcing ``u_i = 0`` on dofs outside the active mesh.

    The full-order states are exactly zero there; writing that constraint
    into the projected system keeps modes that vanish on the physical domain
    from leaving the reduced operator singular.
    """
    d = np.where(ops.classification.active_mask, 0.0, lumped)
    return sp.diags(d)


def project_operators(
    Bu: np.ndarray, Bw: np.ndarray, ops: OperatorSet, cfg: FomConfig, lumped=None
) -> ReducedOperators:
    """Galerkin projection of the monolithic IMEX operator for one geometry.

    ``lumped`` (lumped background mass) enables the inactive-dof constraint.
    """
    N = ops.A.shape[0]
    if Bu.shape[0] != N or Bw.shape[0] != N:
        raise ValueError(f"basis rows ({Bu.shape[0]}, {Bw.shape[0]}) do not match operators ({N})")
    tau, eps = cfg.tau, cfg.eps
    ABu = ops.A @ Bu
    K = ops.S if ops.D_w is None else ops.S + ops.D_w
    mass_u = Bu.T @ ABu
    M11 = mass_u + tau * (Bu.T @ (ops.J_N @ Bu)) + tau * (Bu.T @ (ops.K_g @ Bu))
    stab = (cfg.stabilization * tau / eps**2) * (Bu.T @ (K @ Bu))
    M11 = M11 + stab
    M12 = tau * (Bu.T @ (K @ Bw))
    M21 = eps**2 * (Bw.T @ (ops.S @ Bu))
    if ops.D_u is not None:
        M21 = M21 + Bw.T @ (ops.D_u @ Bu)
    M22 = -(Bw.T @ (ops.A @ Bw)) - Bw.T @ (ops.K_gw @ Bw)
    if lumped is not None:
        P = inactive_mass(ops, lumped)
        M11 = M11 + Bu.T @ (P @ Bu)
        M22 = M22 - Bw.T @ (P @ Bw)
    lhs = np.block([[M11, M12], [M21, M22]])
    return ReducedOperators(
        lhs=lhs, rhs_u=mass_u + stab,
        load_v=tau * (Bu.T @ ops.b_v), load_q=Bw.T @ ops.b_q,
        Bu=Bu, Bw=Bw, ops=ops,
    )


def rom_step(a: np.ndarray, ro: ReducedOperators, cfg: FomConfig):
    """One reduced IMEX step; returns the new ``(a, b)`` coefficients."""
    u = ro.Bu @ a
    nl = ro.ops.nonlinear_load(u, cfg.gamma, cfg.eps)
    r1 = ro.rhs_u @ a + ro.load_v
    r2 = -(ro.Bw.T @ nl) + ro.load_q
    try:
        x = np.linalg.solve(ro.lhs, np.concatenate([r1, r2]))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"reduced solve failed: {exc}") from exc
    r = len(a)
    return x[:r], x[r:]


def project_initial(u0: np.ndarray, Bu: np.ndarray, A) -> np.ndarray:
    """Coefficients of the ``A``-orthogonal projection of ``u0`` onto the modes."""
    AB = A @ Bu
    G = Bu.T @ AB
    return la.solve(0.5 * (G + G.T), AB.T @ u0, assume_a="pos")


@dataclass
class RomResult:
    a: np.ndarray  # (n_steps+1, r_u)
    b: np.ndarray  # (n_steps+1, r_w)
    Bu: np.ndarray = field(repr=False)
    Bw: np.ndarray = field(repr=False)
    projection_seconds: float = 0.0
    solve_seconds: np.ndarray = None
    wall_seconds: float = 0.0
    mass_matrices: list = field(default_factory=list, repr=False)

    def u(self, k: int) -> np.ndarray:
        return self.Bu @ self.a[k]

    def w(self, k: int) -> np.ndarray:
        return self.Bw @ self.b[k]


def run_rom(
    cfg: FomConfig,
    basis_u: PodBasis,
    basis_w: PodBasis,
    u0: np.ndarray,
    mesh: BackgroundMesh,
    n_u: Optional[int] = None,
    n_w: Optional[int] = None,
    ops: Optional[OperatorSet] = None,
    lumped: Optional[np.ndarray] = None,
) -> RomResult:
    """Online stage: assemble full operators for the geometry, project, integrate.

    For a moving level set the full operators are re-assembled and projected at
    every time level, as in the full-order model.
    """
    t_start = time.perf_counter()
    Bu = basis_u.modes[:, : (n_u or basis_u.n_modes)]
    Bw = basis_w.modes[:, : (n_w or n_u or basis_w.n_modes)]
    ls = cfg.geometry
    moving = ls.kind == "moving_circle"
    if ops is None:
        ops = assembly.assemble_operators(mesh, ls, 0.0, cfg)
    if lumped is None:
        lumped = lumped_background_mass(mesh)
    u0 = np.where(ops.classification.active_mask, u0, 0.0)
    a = project_initial(u0, Bu, ops.A + inactive_mass(ops, lumped))
    t0 = time.perf_counter()
    ro = project_operators(Bu, Bw, ops, cfg, lumped) if not moving else None
    projection = time.perf_counter() - t0
    A_list = [ops.A]
    a_hist = [a]
    b_hist = [np.zeros(Bw.shape[1])]
    solve_s = [0.0]
    for k in range(1, cfg.n_steps + 1):
        if moving:
            t0 = time.perf_counter()
            ops_k = assembly.assemble_operators(mesh, ls, step_time(cfg, k), cfg)
            ro = project_operators(Bu, Bw, ops_k, cfg, lumped)
            projection += time.perf_counter() - t0
            A_list.append(ops_k.A)
        t0 = time.perf_counter()
        a, b = rom_step(a, ro, cfg)
        solve_s.append(time.perf_counter() - t0)
        a_hist.append(a)
        b_hist.append(b)
    return RomResult(
        a=np.array(a_hist), b=np.array(b_hist), Bu=Bu, Bw=Bw,
        projection_seconds=projection, solve_seconds=np.array(solve_s),
        wall_seconds=time.perf_counter() - t_start,
        mass_matrices=A_list if moving else [ops.A],
    )


def background_mass(mesh: BackgroundMesh) -> sp.csr_matrix:
    """Uncut P1 mass matrix of the whole square."""
    cc = cutgeom.classify(mesh, LevelSet.circle(0.0))
    return assembly.assemble_mass(mesh, cutgeom.volume_rules(mesh, cc, 2))


def lumped_background_mass(mesh: BackgroundMesh) -> np.ndarray:
    return np.asarray(background_mass(mesh).sum(axis=1)).ravel()


def l2_norm(v: np.ndarray, A) -> float:
    return float(np.sqrt(max(v @ (A @ v), 0.0)))


def relative_error(fom_traj, rom_traj, A, steps=None, floor: float = 1e-14):
    """Per-step ``|u - u_r|_A / |u|_A`` and its mean over the given steps.

    ``A`` is a single mass matrix or one per step (moving geometry). Steps
    where the reference norm falls below ``floor`` report the absolute error.
    """
    n = len(fom_traj)
    steps = range(n) if steps is None else steps
    errs = []
    for k in steps:
        Ak = A[k] if isinstance(A, (list, tuple)) else A
        d = l2_norm(fom_traj[k] - rom_traj[k], Ak)
        ref = l2_norm(fom_traj[k], Ak)
        errs.append(d / ref if ref >= floor else d)
    errs = np.array(errs)
    return errs, float(errs.mean()) if len(errs) else 0.0
