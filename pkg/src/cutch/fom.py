"""Full-order IMEX Euler integration of the split Cahn-Hilliard system."""

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import assembly, cutgeom
from .assembly import OperatorSet
from .cutgeom import LevelSet
from .mesh import BackgroundMesh, build_background_mesh
from .rng import uniform01

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Raised when the monolithic linear system cannot be solved."""

    def __init__(self, message, step=None, condition=None):
        super().__init__(message)
        self.step = step
        self.condition = condition


@dataclass
class FomConfig:
    eps: float = 1e-2
    gamma: tuple = (2.0, 9.0, 4.0)  # (g0, g1, g2)
    alpha_n: float = 10.0
    alpha_1: float = 1e-3
    alpha_d: float = 10.0
    tau: float = 1.5625e-6
    n_steps: int = 100
    bc: str = "neumann"
    geometry: LevelSet = field(default_factory=LevelSet)
    n: int = 48
    gp_variant: str = "value_jump"
    gp_on_w: bool = False
    g_n: float = 0.0
    solver_tol: float = 1e-12
    volume_order: int = 4
    interface_order: int = 3
    energy_order: int = 6
    # linear stabilization s: adds s/eps^2 (u^{n+1} - u^n) to the chemical
    # potential, written in the first row as (s/eps^2) M12 (u^{n+1} - u^n);
    # stable when s >= max F''/2 over the solution range
    stabilization: float = 2.0
    reuse_factorization: bool = False

    def __post_init__(self):
        if not self.gamma[2] > 0:
            raise ValueError("the quartic coefficient gamma_2 must be positive")
        if not self.eps > 0 or not self.tau > 0:
            raise ValueError("eps and tau must be positive")
        if self.bc not in ("neumann", "dirichlet_embedded"):
            raise ValueError(f"unknown bc {self.bc!r}")

    def with_(self, **kw) -> "FomConfig":
        return replace(self, **kw)


@dataclass
class State:
    u: np.ndarray
    w: np.ndarray
    step_index: int = 0
    tau: float = 0.0

    @property
    def time(self) -> float:
        return self.step_index * self.tau


def stabilization_for_range(gamma, lo: float, hi: float, margin: float = 1.1) -> float:
    """Smallest stable linear stabilization for values in [lo, hi], times ``margin``."""
    g0, g1, g2 = gamma
    u = np.linspace(lo, hi, 201)
    d2 = 3 * g2 * u**2 + 2 * g1 * u + g0
    return max(0.0, margin * 0.5 * float(d2.max()))


def step_time(cfg: FomConfig, k: int) -> float:
    return k * cfg.tau


def stab_operator(ops: OperatorSet):
    """Diffusion operator ``K`` of the first-row coupling (``S``, plus ``D_w`` for Dirichlet)."""
    return ops.S if ops.D_w is None else ops.S + ops.D_w


def block_system(ops: OperatorSet, cfg: FomConfig) -> sp.csr_matrix:
    """Monolithic matrix restricted to the active dofs, unknowns ``[u; w]``."""
    act = ops.active_dofs
    tau, eps = cfg.tau, cfg.eps

    def sub(M):
        return M[act][:, act]

    A, S = sub(ops.A), sub(ops.S)
    M11 = A + tau * sub(ops.J_N) + tau * sub(ops.K_g)
    M12 = tau * S
    M21 = eps**2 * S
    M22 = -(A + sub(ops.K_gw))
    if ops.D_u is not None:
        M12 = M12 + tau * sub(ops.D_w)
        M21 = M21 + sub(ops.D_u)
    if cfg.stabilization:
        M11 = M11 + (cfg.stabilization / eps**2) * M12
    return sp.bmat([[M11, M12], [M21, M22]], format="csc")


def block_rhs(u_prev: np.ndarray, ops: OperatorSet, cfg: FomConfig, nonlinear=None):
    act = ops.active_dofs
    if nonlinear is None:
        nonlinear = ops.nonlinear_load(u_prev, cfg.gamma, cfg.eps)
    r1 = ops.A @ u_prev + cfg.tau * ops.b_v
    r2 = -nonlinear + ops.b_q
    if cfg.stabilization:
        r1 = r1 + (cfg.stabilization * cfg.tau / cfg.eps**2) * (stab_operator(ops) @ u_prev)
    return np.concatenate([r1[act], r2[act]])


def condition_estimate(M: sp.spmatrix, lu=None) -> float:
    """1-norm condition number estimate ``|M|_1 |M^-1|_1``."""
    M = sp.csc_matrix(M)
    if lu is None:
        lu = spla.splu(M)
    n = M.shape[0]
    inv = spla.LinearOperator(
        (n, n), matvec=lu.solve, rmatvec=lambda x: lu.solve(x, trans="T"), dtype=float
    )
    return float(spla.norm(M, 1) * spla.onenormest(inv))


def _factorize(M, step):
    try:
        return spla.splu(sp.csc_matrix(M))
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed at step {step}: {exc}", step=step) from exc


def _solve(lu, M, rhs, step, tol):
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        cond = condition_estimate(M, lu)
        raise SolverError(f"non-finite solution at step {step} (cond ~ {cond:.3e})", step, cond)
    res = np.linalg.norm(M @ x - rhs)
    scale = np.linalg.norm(rhs) + 1e-300
    if res > max(tol, 1e-8) * scale * 1e4:
        # refine once; direct solves of badly scaled cut systems can lose digits
        x = x + lu.solve(rhs - M @ x)
    return x


def imex_step(state: State, ops: OperatorSet, cfg: FomConfig, _lu=None) -> State:
    """Advance one IMEX Euler step; the nonlinearity is evaluated at ``state.u``."""
    M = block_system(ops, cfg)
    lu = _lu if _lu is not None else _factorize(M, state.step_index + 1)
    rhs = block_rhs(state.u, ops, cfg)
    x = _solve(lu, M, rhs, state.step_index + 1, cfg.solver_tol)
    act = ops.active_dofs
    N = len(state.u)
    u = np.zeros(N)
    w = np.zeros(N)
    u[act] = x[: len(act)]
    w[act] = x[len(act):]
    return State(u, w, state.step_index + 1, cfg.tau)


def compute_mass(u: np.ndarray, A: sp.spmatrix) -> float:
    """``1^T A u``, the integral of ``u_h`` over the physical domain."""
    return float(np.sum(A @ u))


class EnergyEvaluator:
    """Ginzburg-Landau energy on a fixed geometry with an order-6 rule."""

    def __init__(self, mesh: BackgroundMesh, ops: OperatorSet, cfg: FomConfig):
        rules = cutgeom.volume_rules(mesh, ops.classification, cfg.energy_order)
        self.E = assembly.evaluation_matrix(mesh, rules)
        self.weights = rules.weights
        self.S = ops.S
        self.cfg = cfg

    def __call__(self, u: np.ndarray) -> float:
        bulk = np.dot(self.weights, assembly.potential(self.E @ u, self.cfg.gamma))
        return float(bulk + 0.5 * self.cfg.eps**2 * (u @ (self.S @ u)))


def compute_energy(u, mesh: BackgroundMesh, ops: OperatorSet, cfg: FomConfig) -> float:
    return EnergyEvaluator(mesh, ops, cfg)(u)


CROSS_VALUES = {"i": (0.95, -0.95), "ii": (0.6, 0.0)}


def cross_indicator(x, y):
    """True inside the two arms of the cross-shaped benchmark interface."""
    X, Y = x - 0.5, y - 0.5
    arm1 = 5 * np.abs(Y - 0.4 * X) + np.abs(0.4 * X - Y) <= 1
    arm2 = 5 * np.abs(X - 0.4 * Y) + np.abs(0.4 * Y - X) <= 1
    return arm1 | arm2


def initial_cross(setting: str, mesh: BackgroundMesh) -> np.ndarray:
    high, low = CROSS_VALUES[setting]
    inside = cross_indicator(mesh.vertices[:, 0], mesh.vertices[:, 1])
    return np.where(inside, high, low).astype(float)


def initial_pseudorandom(seed: int, mesh: BackgroundMesh, low=-0.05, high=0.05) -> np.ndarray:
    if low > high:
        raise ValueError("low must not exceed high")
    return low + (high - low) * uniform01(seed, mesh.n_vertices)


@dataclass
class FomResult:
    states: list
    mass: np.ndarray
    energy: np.ndarray
    solve_seconds: np.ndarray
    snapshots_u: dict = field(default_factory=dict)
    snapshots_w: dict = field(default_factory=dict)
    operators: Optional[OperatorSet] = None
    wall_seconds: float = 0.0

    def diagnostics_rows(self, tau):
        for k, (m, e, s) in enumerate(zip(self.mass, self.energy, self.solve_seconds)):
            yield {"step": k, "time": k * tau, "mass": m, "energy": e, "solve_seconds": s}


def write_diagnostics_csv(path, result: FomResult, tau: float, header: str = "") -> None:
    with open(path, "w") as f:
        if header:
            for line in header.splitlines():
                f.write(f"# {line}\n")
        f.write("step,time,mass,energy,solve_seconds\n")
        for r in result.diagnostics_rows(tau):
            f.write(f"{r['step']},{r['time']!r},{r['mass']!r},{r['energy']!r},{r['solve_seconds']!r}\n")


def run_fom(
    cfg: FomConfig,
    u0: np.ndarray,
    mesh: Optional[BackgroundMesh] = None,
    record_steps=None,
    keep_states: bool = True,
    diagnostics: bool = True,
    callback=None,
) -> FomResult:
    """Integrate ``cfg.n_steps`` IMEX steps from ``u0`` (restricted to the active set).

    Snapshots are stored for the step indices in ``record_steps``. For a
    moving level set, operators are rebuilt at every new time level and
    diagnostics use the geometry of that level.
    """
    t_start = time.perf_counter()
    mesh = mesh or build_background_mesh(cfg.n)
    ls = cfg.geometry
    moving = ls.kind == "moving_circle"
    record = set(record_steps) if record_steps is not None else set()

    ops = assembly.assemble_operators(mesh, ls, 0.0, cfg)
    u = np.where(ops.classification.active_mask, u0, 0.0).astype(float)
    state = State(u, np.zeros_like(u), 0, cfg.tau)
    energy_of = EnergyEvaluator(mesh, ops, cfg) if diagnostics else None

    states = [state] if keep_states else []
    mass = [compute_mass(state.u, ops.A)]
    energy = [energy_of(state.u) if diagnostics else np.nan]
    solve_s = [0.0]
    snaps_u, snaps_w = {}, {}
    if 0 in record:
        snaps_u[0] = state.u.copy()
        snaps_w[0] = state.w.copy()

    lu = None
    for k in range(1, cfg.n_steps + 1):
        if moving:
            ops = assembly.assemble_operators(mesh, ls, step_time(cfg, k), cfg)
            if diagnostics:
                energy_of = EnergyEvaluator(mesh, ops, cfg)
        t0 = time.perf_counter()
        if cfg.reuse_factorization and not moving:
            if lu is None:
                lu = _factorize(block_system(ops, cfg), k)
            state = imex_step(state, ops, cfg, _lu=lu)
        else:
            state = imex_step(state, ops, cfg)
        solve_s.append(time.perf_counter() - t0)
        if keep_states:
            states.append(state)
        if diagnostics:
            mass.append(compute_mass(state.u, ops.A))
            energy.append(energy_of(state.u))
        if k in record:
            snaps_u[k] = state.u.copy()
            snaps_w[k] = state.w.copy()
        if callback is not None:
            callback(k, state, ops)
    if not keep_states:
        states = [state]
    return FomResult(
        states=states,
        mass=np.array(mass),
        energy=np.array(energy),
        solve_seconds=np.array(solve_s),
        snapshots_u=snaps_u,
        snapshots_w=snaps_w,
        operators=ops,
        wall_seconds=time.perf_counter() - t_start,
    )
