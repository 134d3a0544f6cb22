"""Experiment configuration, orchestration and the command line."""

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import assembly, fom, rom
from .cutgeom import LevelSet
from .fom import FomConfig
from .mesh import BackgroundMesh, build_background_mesh
from .rng import sample_parameters

log = logging.getLogger(__name__)

KINDS = (
    "cross_benchmark",
    "geo_neumann",
    "geo_dirichlet",
    "extended_range",
    "moving_circle",
    "condition_sweep",
)

SCALE_DEFAULTS = {
    "desk": {"n": 24, "n_train": 100, "n_test": 10},
    "paper": {"n": 48, "n_train": 900, "n_test": 30},
}

KIND_DEFAULTS = {
    "cross_benchmark": {"bc": "neumann"},
    "geo_neumann": {"bc": "neumann"},
    "geo_dirichlet": {"bc": "dirichlet_embedded"},
    "extended_range": {"bc": "neumann", "train_range": (0.36, 0.54), "test_range": (0.38, 0.52)},
    "moving_circle": {"bc": "dirichlet_embedded", "mode_counts": [1, 3, 5, 7, 9, 11]},
    "condition_sweep": {"bc": "neumann"},
}

# the classical u^3 - u setting and the one used for the ROM studies
CROSS_GAMMA = {"i": (-1.0, 0.0, 1.0), "ii": (2.0, 9.0, 4.0)}

U64 = (1 << 64) - 1


@dataclass
class ExperimentConfig:
    kind: str = "geo_neumann"
    scale: str = "desk"
    n: int = 24
    eps: float = 1e-2
    gamma: tuple = (2.0, 9.0, 4.0)
    alpha_n: float = 10.0
    alpha_1: float = 1e-3
    alpha_d: float = 10.0
    tau: float = 1.5625e-6
    n_steps: int = 100
    bc: str = "neumann"
    gp_variant: str = "value_jump"
    gp_on_w: bool = False
    g_n: float = 0.0
    solver_tol: float = 1e-12
    stabilization: float = 2.0
    reuse_factorization: bool = False
    train_range: tuple = (0.36, 0.48)
    test_range: tuple = (0.40, 0.44)
    n_train: int = 100
    n_test: int = 10
    record_steps: Optional[list] = None
    mode_counts: list = field(default_factory=lambda: [1, 5, 10, 15, 20, 25, 30, 35, 40, 45])
    basis_modes: Optional[int] = None  # stored modes per field, None keeps all
    seed: int = 0
    output_dir: str = "runs"
    ic_range: tuple = (-0.05, 0.05)
    workers: int = 1
    # cross benchmark
    cross_settings: tuple = ("i", "ii")
    cross_steps: int = 10000
    cross_tau: float = 1e-8
    contour_every: int = 100
    # moving circle
    delta: float = 0.42
    theta0: tuple = (0.0, 0.1)
    x0: float = 0.0039
    mu_min: float = 0.1
    mu_max: float = 0.15
    # condition sweep
    n_sweep: int = 20
    # compare
    compare_mu: Optional[float] = None
    compare_steps: list = field(default_factory=lambda: [10, 20, 40, 60, 100])

    def __post_init__(self):
        for name in ("gamma", "train_range", "test_range", "ic_range", "theta0", "cross_settings"):
            setattr(self, name, tuple(getattr(self, name)))
        self.mode_counts = [int(r) for r in self.mode_counts]
        self.seed = int(self.seed) & U64
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.scale not in SCALE_DEFAULTS:
            raise ValueError(f"unknown scale {self.scale!r}")
        if self.kind in ("geo_neumann", "geo_dirichlet", "extended_range"):
            (a, b), (c, d) = self.train_range, self.test_range
            if not (a < c < d < b):
                raise ValueError(
                    f"test range {self.test_range} must lie strictly inside train range {self.train_range}"
                )
        if min(self.mode_counts, default=1) < 1:
            raise ValueError("mode counts must be positive")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def header(self) -> str:
        return "config: " + json.dumps(self.to_dict(), sort_keys=True)

    def fom_config(self, geometry: Optional[LevelSet] = None, **kw) -> FomConfig:
        cfg = FomConfig(
            eps=self.eps,
            gamma=tuple(self.gamma),
            alpha_n=self.alpha_n,
            alpha_1=self.alpha_1,
            alpha_d=self.alpha_d,
            tau=self.tau,
            n_steps=self.n_steps,
            bc=self.bc,
            geometry=geometry or LevelSet(),
            n=self.n,
            gp_variant=self.gp_variant,
            gp_on_w=self.gp_on_w,
            g_n=self.g_n,
            solver_tol=self.solver_tol,
            stabilization=self.stabilization,
            reuse_factorization=self.reuse_factorization,
        )
        return cfg.with_(**kw) if kw else cfg

    def moving_level_set(self) -> LevelSet:
        return LevelSet(
            kind="moving_circle", delta=self.delta, theta0=tuple(self.theta0), x0=self.x0,
            mu_min=self.mu_min, mu_max=self.mu_max, T=self.n_steps * self.tau,
        )

    def train_parameters(self) -> np.ndarray:
        return sample_parameters(self.seed, self.n_train, *self.train_range)

    def test_parameters(self) -> np.ndarray:
        return sample_parameters((self.seed + 1) & U64, self.n_test, *self.test_range)


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Resolve kind/scale defaults, then the JSON file, then ``overrides``.

    ``None`` overrides are ignored so unset CLI flags do not clobber the file.
    """
    data = {}
    if path is not None:
        with open(path) as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    kind = data.get("kind", "geo_neumann")
    scale = data.get("scale", "desk")
    if kind not in KIND_DEFAULTS:
        raise ValueError(f"unknown experiment kind {kind!r}")
    if scale not in SCALE_DEFAULTS:
        raise ValueError(f"unknown scale {scale!r}")
    merged = {**KIND_DEFAULTS[kind], **SCALE_DEFAULTS[scale], **data}
    return ExperimentConfig(**merged)


# ----------------------------------------------------------------------------
# output helpers


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_table(path, columns, rows, cfg: ExperimentConfig) -> Path:
    """CSV with the resolved config as a leading ``#`` comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write(f"# {cfg.header()}\n")
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def read_table(path):
    """Rows of a table written by :func:`write_table` as dicts of strings."""
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, outputs, **extra) -> Path:
    path = Path(out) / f"{command}_manifest.json"
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "outputs": sorted(str(Path(p).name) for p in outputs),
        **extra,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, default=float)
    return path


def _out_dir(cfg: ExperimentConfig, out) -> Path:
    d = Path(out if out is not None else cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _initial_state(cfg: ExperimentConfig, mesh: BackgroundMesh) -> np.ndarray:
    return fom.initial_pseudorandom(cfg.seed, mesh, *cfg.ic_range)


# ----------------------------------------------------------------------------
# contour shape


@dataclass
class ContourMetrics:
    area: float
    perimeter: float
    walls: int
    ratio: float


def contour_metrics(mesh: BackgroundMesh, u: np.ndarray, level: float) -> ContourMetrics:
    """Shape of the superlevel set ``{u_h > level}`` of a P1 field.

    The perimeter counts only the level line, not the domain walls. A region
    touching ``k`` walls is compared with its mirror images, so the ratio is
    ``4 pi A / (2^k P^2)``; a quarter disc in a corner scores 1.
    """
    tri = mesh.triangles
    g = level - u[tri]  # < 0 inside the region
    inside = g < 0
    n_in = inside.sum(axis=1)
    areas = np.abs(mesh.areas)
    area = float(areas[n_in == 3].sum())

    mixed = np.flatnonzero((n_in == 1) | (n_in == 2))
    perimeter = 0.0
    if len(mixed):
        gi = g[mixed]
        ins = inside[mixed]
        # the vertex whose side differs from the other two
        lone = np.where(n_in[mixed] == 1, np.argmax(ins, axis=1), np.argmin(ins, axis=1))
        others = (lone[:, None] + np.array([1, 2])) % 3
        rows = np.arange(len(mixed))
        gl = gi[rows, lone]
        p = mesh.vertices[tri[mixed]]
        pl = p[rows, lone]
        t = np.empty((len(mixed), 2))
        pts = np.empty((len(mixed), 2, 2))
        for j in range(2):
            go = gi[rows, others[:, j]]
            t[:, j] = gl / (gl - go)
            pts[:, j] = pl + t[:, j, None] * (p[rows, others[:, j]] - pl)
        corner = areas[mixed] * t[:, 0] * t[:, 1]
        lone_inside = ins[rows, lone]
        area += float(np.where(lone_inside, corner, areas[mixed] - corner).sum())
        perimeter = float(np.linalg.norm(pts[:, 0] - pts[:, 1], axis=1).sum())

    v = mesh.vertices
    hot = u > level
    walls = sum(
        bool(np.any(hot & np.isclose(coord, side)))
        for coord in (v[:, 0], v[:, 1])
        for side in (-0.5, 0.5)
    )
    ratio = 4 * np.pi * area / (2**walls * perimeter**2) if perimeter > 0 else float("nan")
    return ContourMetrics(area, perimeter, walls, float(ratio))


# ----------------------------------------------------------------------------
# experiments


def cross_benchmark(cfg: ExperimentConfig, out=None, settings=None, n_steps=None, checkpoints=()):
    """Both cross-shaped initial states on the uncut square.

    Returns a dict per setting with the contour ratio series, mass drift and
    ratios at the requested ``checkpoints`` (step indices).
    """
    out = _out_dir(cfg, out)
    mesh = build_background_mesh(cfg.n)
    n_steps = cfg.cross_steps if n_steps is None else n_steps
    report, outputs = {}, []
    for setting in settings or cfg.cross_settings:
        gamma = CROSS_GAMMA[setting]
        hi, lo = fom.CROSS_VALUES[setting]
        level = 0.5 * (hi + lo)
        fcfg = cfg.fom_config(
            LevelSet.circle(0.0), gamma=gamma, tau=cfg.cross_tau, n_steps=n_steps,
            stabilization=fom.stabilization_for_range(gamma, lo, hi), reuse_factorization=True,
        )
        u0 = fom.initial_cross(setting, mesh)
        every = max(1, cfg.contour_every)
        rows = []
        marks = {}

        def record(k, u):
            m = contour_metrics(mesh, u, level)
            rows.append((k, k * fcfg.tau, m.area, m.perimeter, m.walls, m.ratio))
            return m

        first = record(0, u0)

        def callback(k, state, ops):
            if k % every == 0 or k == n_steps or k in checkpoints:
                m = record(k, state.u)
                if k in checkpoints:
                    marks[k] = m.ratio

        res = fom.run_fom(fcfg, u0, mesh, keep_states=False, callback=callback)
        final = rows[-1]
        drift = float(np.max(np.abs(res.mass - res.mass[0])) / max(abs(res.mass[0]), 1e-300))
        diag = out / f"cross_{setting}_diagnostics.csv"
        fom.write_diagnostics_csv(diag, res, fcfg.tau, header=cfg.header())
        table = write_table(
            out / f"cross_{setting}_contour.csv",
            ["step", "time", "area", "perimeter", "walls", "ratio"], rows, cfg,
        )
        outputs += [diag, table]
        report[setting] = {
            "level": level,
            "initial_ratio": first.ratio,
            "final_ratio": final[5],
            "checkpoints": marks,
            "mass_drift": drift,
            "wall_seconds": res.wall_seconds,
            "stabilization": fcfg.stabilization,
        }
        log.info("cross %s: ratio %.4f -> %.4f, drift %.2e", setting, first.ratio, final[5], drift)
    write_manifest(out, "cross_benchmark", cfg, outputs, report=report)
    return report


@dataclass
class OfflineResult:
    basis_u: rom.PodBasis
    basis_w: rom.PodBasis
    train_params: np.ndarray
    fom_seconds: np.ndarray
    pod_seconds: float
    wall_seconds: float
    mesh: BackgroundMesh = field(repr=False)


def offline(cfg: ExperimentConfig, out=None) -> OfflineResult:
    """Training FOM runs, snapshot files, POD bases and the eigenvalue table."""
    t0 = time.perf_counter()
    out = _out_dir(cfg, out)
    mesh = build_background_mesh(cfg.n)
    fcfg = cfg.fom_config()
    u0 = _initial_state(cfg, mesh)
    mus = cfg.train_parameters()
    steps_u = steps_w = None
    if cfg.record_steps is not None:
        steps_u = steps_w = [int(k) for k in cfg.record_steps]
    S_u, S_w, fom_seconds = rom.collect_snapshots(
        fcfg, mus, u0, mesh, steps_u, steps_w, workers=cfg.workers
    )
    t1 = time.perf_counter()
    M = rom.background_mass(mesh)
    basis_u = rom.pod(S_u, M, _store_count(cfg, S_u))
    basis_w = rom.pod(S_w, M, _store_count(cfg, S_w))
    pod_seconds = time.perf_counter() - t1

    outputs = _write_offline_files(out, cfg, mesh, S_u, S_w, basis_u, basis_w)
    wall = time.perf_counter() - t0
    write_manifest(
        out, "offline", cfg, outputs,
        train_params=[float(m) for m in mus],
        timing={"fom_seconds_total": float(fom_seconds.sum()), "pod_seconds": pod_seconds, "wall_seconds": wall},
        n_modes={"u": basis_u.n_modes, "w": basis_w.n_modes},
    )
    return OfflineResult(basis_u, basis_w, mus, fom_seconds, pod_seconds, wall, mesh)


def _store_count(cfg, S):
    if cfg.basis_modes is None:
        return None
    return min(cfg.basis_modes, min(S.data.shape))


def _write_offline_files(out, cfg, mesh, S_u, S_w, basis_u, basis_w, prefix=""):
    paths = {
        "su": out / f"{prefix}snapshots_u.chsnap",
        "sw": out / f"{prefix}snapshots_w.chsnap",
        "bu": out / f"{prefix}basis_u.chsnap",
        "bw": out / f"{prefix}basis_w.chsnap",
    }
    rom.write_snapshots(paths["su"], S_u)
    rom.write_snapshots(paths["sw"], S_w)
    rom.write_basis(paths["bu"], basis_u)
    rom.write_basis(paths["bw"], basis_w)
    lu, lw = basis_u.eigenvalues, basis_w.eigenvalues
    rows = []
    for i in range(max(len(lu), len(lw))):
        rows.append((
            i + 1,
            lu[i] if i < len(lu) else "",
            lu[i] / lu[0] if i < len(lu) else "",
            lw[i] if i < len(lw) else "",
            lw[i] / lw[0] if i < len(lw) else "",
        ))
    eig = write_table(
        out / f"{prefix}eigenvalues.csv",
        ["index", "lambda_u", "relative_u", "lambda_w", "relative_w"], rows, cfg,
    )
    mesh_csv = out / "mesh.csv"
    mesh.to_csv(mesh_csv)
    return list(paths.values()) + [eig, mesh_csv]


def _load_bases(out: Path, prefix=""):
    bu = out / f"{prefix}basis_u.chsnap"
    bw = out / f"{prefix}basis_w.chsnap"
    if not bu.exists() or not bw.exists():
        raise FileNotFoundError(f"no POD basis in {out}; run the offline stage first")
    return rom.read_basis(bu), rom.read_basis(bw)


@dataclass
class OnlineResult:
    mode_counts: list
    u_error: np.ndarray  # mean over tests and steps, per mode count
    w_error: np.ndarray
    u_error_steps: np.ndarray  # (n_modes, n_steps) mean over tests
    w_error_steps: np.ndarray
    rom_seconds: np.ndarray  # mean per test parameter
    fom_seconds: float
    rom_step_seconds: np.ndarray
    fom_step_seconds: float
    test_params: np.ndarray


def online(cfg: ExperimentConfig, out=None, bases=None) -> OnlineResult:
    """Reduced solves against reference FOM runs at the test parameters."""
    out = _out_dir(cfg, out)
    basis_u, basis_w = bases if bases is not None else _load_bases(out)
    mesh = build_background_mesh(cfg.n)
    if basis_u.modes.shape[0] != mesh.n_vertices:
        raise ValueError("basis does not match the configured mesh")
    u0 = _initial_state(cfg, mesh)
    lumped = rom.lumped_background_mass(mesh)
    mus = cfg.test_parameters()
    counts = [min(r, basis_u.n_modes, basis_w.n_modes) for r in cfg.mode_counts]
    steps = range(1, cfg.n_steps + 1)

    eu = np.zeros((len(counts), len(mus), cfg.n_steps))
    ew = np.zeros_like(eu)
    t_rom = np.zeros((len(counts), len(mus)))
    t_rom_step = np.zeros_like(t_rom)
    t_fom, t_fom_step = [], []
    for j, mu in enumerate(mus):
        fcfg = cfg.fom_config(LevelSet.circle(mu))
        ref = fom.run_fom(fcfg, u0, mesh, diagnostics=False)
        t_fom.append(ref.wall_seconds)
        t_fom_step.append(float(np.mean(ref.solve_seconds[1:])))
        U = [s.u for s in ref.states]
        W = [s.w for s in ref.states]
        A = ref.operators.A
        for i, r in enumerate(counts):
            res = rom.run_rom(fcfg, basis_u, basis_w, u0, mesh, n_u=r, n_w=r, lumped=lumped)
            t_rom[i, j] = res.wall_seconds
            t_rom_step[i, j] = float(np.mean(res.solve_seconds[1:]))
            eu[i, j], _ = rom.relative_error(U, [res.u(k) for k in range(len(U))], A, steps)
            ew[i, j], _ = rom.relative_error(W, [res.w(k) for k in range(len(W))], A, steps)
        log.info("online mu=%.5f done (%d/%d)", mu, j + 1, len(mus))

    result = OnlineResult(
        mode_counts=counts,
        u_error=eu.mean(axis=(1, 2)),
        w_error=ew.mean(axis=(1, 2)),
        u_error_steps=eu.mean(axis=1),
        w_error_steps=ew.mean(axis=1),
        rom_seconds=t_rom.mean(axis=1),
        fom_seconds=float(np.mean(t_fom)),
        rom_step_seconds=t_rom_step.mean(axis=1),
        fom_step_seconds=float(np.mean(t_fom_step)),
        test_params=mus,
    )
    _write_online_tables(out, cfg, result)
    return result


def _write_online_tables(out, cfg, res: OnlineResult, prefix="online"):
    rows = []
    for i, r in enumerate(res.mode_counts):
        savings = (res.fom_seconds - res.rom_seconds[i]) / res.fom_seconds
        rows.append((
            r, res.u_error[i], res.w_error[i], res.rom_seconds[i], res.fom_seconds,
            100 * savings, res.rom_step_seconds[i], res.fom_step_seconds,
        ))
    errors = write_table(
        out / f"{prefix}_errors.csv",
        ["modes", "u_error", "w_error", "rom_seconds", "fom_seconds", "savings_percent",
         "rom_step_seconds", "fom_step_seconds"],
        rows, cfg,
    )
    per_step = [
        (r, k + 1, res.u_error_steps[i, k], res.w_error_steps[i, k])
        for i, r in enumerate(res.mode_counts)
        for k in range(res.u_error_steps.shape[1])
    ]
    steps = write_table(out / f"{prefix}_errors_per_step.csv", ["modes", "step", "u_error", "w_error"], per_step, cfg)
    write_manifest(
        out, prefix, cfg, [errors, steps],
        test_params=[float(m) for m in res.test_params],
        summary={str(r): float(e) for r, e in zip(res.mode_counts, res.u_error)},
    )


@dataclass
class MovingResult:
    mode_counts: list
    full_rank: int
    u_error: np.ndarray
    w_error: np.ndarray
    u_error_steps: np.ndarray
    fom_seconds: float
    rom_seconds: np.ndarray


def moving_circle(cfg: ExperimentConfig, out=None) -> MovingResult:
    """Train on one moving-hole trajectory and replay it with reduced bases.

    The last table row uses every retained mode (the full snapshot rank).
    """
    out = _out_dir(cfg, out)
    mesh = build_background_mesh(cfg.n)
    fcfg = cfg.fom_config(cfg.moving_level_set())
    u0 = _initial_state(cfg, mesh)
    steps_u, steps_w = rom.default_record_steps(cfg.n_steps)
    ref = fom.run_fom(fcfg, u0, mesh, record_steps=set(steps_u) | set(steps_w))
    S_u = rom.SnapshotMatrix(
        np.column_stack([ref.snapshots_u[k] for k in steps_u]), [0.0] * len(steps_u), steps_u, "u"
    )
    S_w = rom.SnapshotMatrix(
        np.column_stack([ref.snapshots_w[k] for k in steps_w]), [0.0] * len(steps_w), steps_w, "w"
    )
    M = rom.background_mass(mesh)
    basis_u, basis_w = rom.pod(S_u, M), rom.pod(S_w, M)
    outputs = _write_offline_files(out, cfg, mesh, S_u, S_w, basis_u, basis_w, prefix="moving_")

    full = min(basis_u.n_modes, basis_w.n_modes)
    counts = [min(r, full) for r in cfg.mode_counts] + [full]
    U = [s.u for s in ref.states]
    W = [s.w for s in ref.states]
    steps = range(1, cfg.n_steps + 1)
    eu, ew, series, t_rom = [], [], [], []
    lumped = rom.lumped_background_mass(mesh)
    for r in counts:
        res = rom.run_rom(fcfg, basis_u, basis_w, u0, mesh, n_u=r, n_w=r, lumped=lumped)
        e, m = rom.relative_error(U, [res.u(k) for k in range(len(U))], res.mass_matrices, steps)
        _, mw = rom.relative_error(W, [res.w(k) for k in range(len(W))], res.mass_matrices, steps)
        eu.append(m)
        ew.append(mw)
        series.append(e)
        t_rom.append(res.wall_seconds)
    rows = [
        (r, int(i == len(counts) - 1), eu[i], ew[i], t_rom[i], ref.wall_seconds)
        for i, r in enumerate(counts)
    ]
    table = write_table(
        out / "moving_errors.csv",
        ["modes", "full_rank", "u_error", "w_error", "rom_seconds", "fom_seconds"], rows, cfg,
    )
    diag = out / "moving_diagnostics.csv"
    fom.write_diagnostics_csv(diag, ref, fcfg.tau, header=cfg.header())
    write_manifest(out, "moving_circle", cfg, outputs + [table, diag])
    return MovingResult(counts, full, np.array(eu), np.array(ew), np.array(series), ref.wall_seconds, np.array(t_rom))


@dataclass
class SweepResult:
    mus: np.ndarray
    stabilized: np.ndarray
    unstabilized: np.ndarray
    min_cut_fraction: np.ndarray

    @property
    def stabilized_ratio(self) -> float:
        return float(self.stabilized.max() / self.stabilized.min())


def _system_condition(fcfg: FomConfig, mesh: BackgroundMesh):
    ops = assembly.assemble_operators(mesh, fcfg.geometry, 0.0, fcfg)
    return fom.condition_estimate(fom.block_system(ops, fcfg)), ops


def condition_sweep(cfg: ExperimentConfig, out=None, mus=None) -> SweepResult:
    """Condition estimates of the monolithic matrix with and without ghost penalty.

    The stabilized system penalizes both the concentration and the potential
    blocks. Failures of the unstabilized factorization are recorded as inf.
    """
    out = _out_dir(cfg, out)
    mesh = build_background_mesh(cfg.n)
    mus = np.linspace(*cfg.test_range, cfg.n_sweep) if mus is None else np.asarray(mus, dtype=float)
    stab, plain, frac, status = [], [], [], []
    for mu in mus:
        geo = LevelSet.circle(mu)
        c, ops = _system_condition(cfg.fom_config(geo, gp_on_w=True), mesh)
        stab.append(c)
        cut = ops.classification.cut_elements
        sums = ops.rules.element_sums(mesh.n_triangles)
        frac.append(float(np.min(sums[cut] / np.abs(mesh.areas[cut]))) if len(cut) else 1.0)
        try:
            c0, _ = _system_condition(cfg.fom_config(geo, alpha_1=0.0, gp_on_w=False), mesh)
            status.append("ok")
        except (RuntimeError, np.linalg.LinAlgError) as exc:
            log.warning("unstabilized system at mu=%.5f not solvable: %s", mu, exc)
            c0 = float("inf")
            status.append("singular")
        plain.append(c0)
    rows = list(zip(mus, stab, plain, frac, status))
    table = write_table(
        out / "condition_sweep.csv",
        ["mu", "cond_stabilized", "cond_unstabilized", "min_cut_fraction", "unstabilized_status"],
        rows, cfg,
    )
    res = SweepResult(mus, np.array(stab), np.array(plain), np.array(frac))
    write_manifest(out, "condition_sweep", cfg, [table], stabilized_ratio=res.stabilized_ratio)
    return res


def compare(cfg: ExperimentConfig, out=None, bases=None, modes=None):
    """FOM and ROM side by side at one test parameter.

    Writes per-step errors and masses plus vertex fields at ``compare_steps``.
    """
    out = _out_dir(cfg, out)
    basis_u, basis_w = bases if bases is not None else _load_bases(out)
    mesh = build_background_mesh(cfg.n)
    mu = cfg.compare_mu if cfg.compare_mu is not None else float(np.mean(cfg.test_range))
    r = modes or max(cfg.mode_counts)
    r = min(r, basis_u.n_modes, basis_w.n_modes)
    fcfg = cfg.fom_config(LevelSet.circle(mu))
    u0 = _initial_state(cfg, mesh)
    ref = fom.run_fom(fcfg, u0, mesh)
    res = rom.run_rom(fcfg, basis_u, basis_w, u0, mesh, n_u=r, n_w=r)
    A = ref.operators.A
    U = [s.u for s in ref.states]
    Ur = [res.u(k) for k in range(len(U))]
    eu, _ = rom.relative_error(U, Ur, A, range(len(U)))
    ew, _ = rom.relative_error([s.w for s in ref.states], [res.w(k) for k in range(len(U))], A, range(len(U)))
    rows = [
        (k, k * fcfg.tau, eu[k], ew[k], ref.mass[k], fom.compute_mass(Ur[k], A))
        for k in range(len(U))
    ]
    steps_table = write_table(
        out / "compare_steps.csv",
        ["step", "time", "u_error", "w_error", "mass_fom", "mass_rom"], rows, cfg,
    )
    active = ref.operators.classification.active_mask
    field_rows = []
    for k in cfg.compare_steps:
        if 0 <= k < len(U):
            for i in np.flatnonzero(active):
                x, y = mesh.vertices[i]
                field_rows.append((k, i, x, y, U[k][i], Ur[k][i], abs(U[k][i] - Ur[k][i])))
    fields_table = write_table(
        out / "compare_fields.csv",
        ["step", "vertex", "x", "y", "u_fom", "u_rom", "abs_error"], field_rows, cfg,
    )
    write_manifest(out, "compare", cfg, [steps_table, fields_table], mu=mu, modes=r)
    return {"mu": mu, "modes": r, "u_error": eu, "w_error": ew}


# ----------------------------------------------------------------------------
# command line

COMMANDS = {
    "cross-benchmark": "cross_benchmark",
    "offline": None,
    "online": None,
    "moving-circle": "moving_circle",
    "condition-sweep": "condition_sweep",
    "compare": None,
}


def _parse_modes(text: str):
    try:
        modes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--modes expects comma separated integers, got {text!r}")
    if not modes or min(modes) < 1:
        raise argparse.ArgumentTypeError("--modes needs positive integers")
    return modes


def _parse_seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v <= U64:
        raise argparse.ArgumentTypeError("--seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cutch", description="CutFEM Cahn-Hilliard solver and POD-Galerkin ROM")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="JSON config file")
        s.add_argument("--seed", type=_parse_seed)
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--modes", type=_parse_modes, help="comma separated mode counts")
        s.add_argument("--scale", choices=sorted(SCALE_DEFAULTS))
    return p


def config_from_args(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "scale": args.scale, "mode_counts": args.modes}
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    kind = COMMANDS[args.command]
    if kind is not None:
        overrides["kind"] = kind
    return load_config(args.config, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_from_args(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.output_dir)
    if args.command == "cross-benchmark":
        report = cross_benchmark(cfg, out)
        for s, r in report.items():
            print(f"setting {s}: ratio {r['initial_ratio']:.4f} -> {r['final_ratio']:.4f}, "
                  f"mass drift {r['mass_drift']:.2e}")
    elif args.command == "offline":
        res = offline(cfg, out)
        print(f"offline: {len(res.train_params)} runs, {res.basis_u.n_modes}/{res.basis_w.n_modes} modes, "
              f"{res.wall_seconds:.1f} s")
    elif args.command == "online":
        res = online(cfg, out)
        for r, eu, ew, t in zip(res.mode_counts, res.u_error, res.w_error, res.rom_seconds):
            print(f"{r:4d} modes: u {eu:.5f}  w {ew:.5f}  rom {t:.3f} s (fom {res.fom_seconds:.3f} s)")
    elif args.command == "moving-circle":
        res = moving_circle(cfg, out)
        for r, eu, ew in zip(res.mode_counts, res.u_error, res.w_error):
            print(f"{r:4d} modes: u {eu:.3e}  w {ew:.3e}")
    elif args.command == "condition-sweep":
        res = condition_sweep(cfg, out)
        print(f"stabilized max/min {res.stabilized_ratio:.2f}, "
              f"unstabilized max {np.max(res.unstabilized):.3e}")
    elif args.command == "compare":
        rep = compare(cfg, out)
        print(f"mu={rep['mu']:.5f} modes={rep['modes']}: mean u error {np.mean(rep['u_error'][1:]):.5f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
