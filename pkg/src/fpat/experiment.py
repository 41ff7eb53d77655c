"""Experiment orchestration: datasets, reconstruction runs, summaries and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .forward import (
    MeasurementSet,
    SolverOptions,
    add_noise,
    boundary_patch_source,
    forward_map,
    relative_error,
    restrict_nearest,
)
from .geometry import ScalarField, build_angular_grid, build_grid, read_field_csv, write_field_csv
from .phantom import ANISOTROPY, RADIUS, SOURCE_POSITIONS, build_phantom
from .recon_hybrid import HybridConfig, run_hybrid
from .recon_opt import StepSearchError, run_opt
from .recon_sim import run_sim
from .transport import hg_kernel

log = logging.getLogger(__name__)

METHODS = ("sim", "opt", "hybrid")
NOISE_LEVELS = (0.0, 0.02, 0.05)
REPORT_METHODS = ("hybrid", "opt")
MANIFEST = "manifest.json"

PROFILES = {
    "default": {"grid": (96, 96), "forward_grid": (128, 128), "n_dir": 32},
    "fast": {"grid": (32, 32), "forward_grid": (48, 48), "n_dir": 16},
}


def default_seed(template: int, noise: float, measurements: int) -> int:
    """Fixed seed per (template, noise, S) so the matrix is reproducible."""
    return 100000 * template + 10 * int(round(noise * 1000)) + measurements


@dataclass(frozen=True)
class ExperimentConfig:
    template: int = 1
    noise: float = 0.0
    measurements: int = 1
    method: str = "hybrid"
    iters: int = 50
    grid: tuple = PROFILES["default"]["grid"]
    forward_grid: tuple = PROFILES["default"]["forward_grid"]
    n_dir: int = PROFILES["default"]["n_dir"]
    seed: int | None = None
    out: str = "fpat-out"
    fast: bool = False
    tol: float = 1e-9
    max_sweeps: int = 500
    solver: str = "bicgstab"
    t1_eta_third: str = "omega4"
    sim_eps1: float = 1e-3
    hybrid_eps1: float = 1e-2
    opt_eps1: float = 1e-12
    opt_eps2: float = 1e-12
    bb_variant: str = "BB1"
    sim_envelope: bool = True
    source_half_width: float = 0.15
    source_cone_deg: float = 60.0
    source_floor: float = 1e-6

    def __post_init__(self):
        if self.template not in (1, 2):
            raise ValueError(f"template must be 1 or 2, got {self.template}")
        if not self.noise >= 0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")
        if not 1 <= self.measurements <= len(SOURCE_POSITIONS):
            raise ValueError(f"measurements must be in 1..4, got {self.measurements}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.iters < 0:
            raise ValueError("iters must be non-negative")
        if self.forward_grid[0] <= self.grid[0] or self.forward_grid[1] <= self.grid[1]:
            raise ValueError(
                f"forward grid {tuple(self.forward_grid)} must be strictly finer than "
                f"inverse grid {tuple(self.grid)}"
            )
        if self.t1_eta_third not in ("omega4", "omega5"):
            raise ValueError("t1_eta_third must be 'omega4' or 'omega5'")

    @property
    def effective_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        return default_seed(self.template, self.noise, self.measurements)

    @property
    def solver_options(self) -> SolverOptions:
        return SolverOptions(self.tol, self.max_sweeps, self.solver)

    @property
    def profile(self) -> str:
        for name, p in PROFILES.items():
            if (tuple(self.grid), tuple(self.forward_grid), self.n_dir) == (
                p["grid"],
                p["forward_grid"],
                p["n_dir"],
            ):
                return name
        return "custom"


# ----------------------------------------------------------------------------
# config files and flag merging

def _grid(v) -> tuple:
    if isinstance(v, (list, tuple)):
        parts = list(v)
    else:
        parts = str(v).replace(",", " ").replace("x", " ").split()
    if len(parts) != 2:
        raise ValueError(f"grid needs two integers, got {v!r}")
    return (int(parts[0]), int(parts[1]))


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


# config-file key / CLI flag -> (ExperimentConfig field, parser)
CONFIG_KEYS = {
    "template": ("template", int),
    "noise": ("noise", float),
    "measurements": ("measurements", int),
    "method": ("method", str),
    "iters": ("iters", int),
    "grid": ("grid", _grid),
    "forward_grid": ("forward_grid", _grid),
    "ndir": ("n_dir", int),
    "seed": ("seed", int),
    "out": ("out", str),
    "fast": ("fast", _bool),
    "solver.tol": ("tol", float),
    "solver.max_sweeps": ("max_sweeps", int),
    "solver.method": ("solver", str),
    "phantom.t1_eta_third": ("t1_eta_third", str),
    "sim.eps1": ("sim_eps1", float),
    "sim.envelope": ("sim_envelope", _bool),
    "hybrid.eps1": ("hybrid_eps1", float),
    "opt.eps1": ("opt_eps1", float),
    "opt.eps2": ("opt_eps2", float),
    "opt.variant": ("bb_variant", str),
    "source.half_width": ("source_half_width", float),
    "source.cone_deg": ("source_cone_deg", float),
    "source.floor": ("source_floor", float),
}


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_config(file_values: dict | None = None, flag_values: dict | None = None) -> ExperimentConfig:
    """Merge defaults < config file < flags.  Keys are ``CONFIG_KEYS`` names;
    ``None`` flag values are treated as unset."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    kwargs = {}
    for key, value in merged.items():
        name, parse = CONFIG_KEYS[key]
        kwargs[name] = parse(value)
    if "grid" in kwargs and "forward_grid" not in kwargs:
        nx, ny = kwargs["grid"]
        kwargs["forward_grid"] = (math.ceil(1.5 * nx), math.ceil(1.5 * ny))
    if kwargs.get("fast"):
        for name, value in PROFILES["fast"].items():
            kwargs.setdefault(name, value)
    return ExperimentConfig(**kwargs)


# ----------------------------------------------------------------------------
# datasets


@dataclass
class Setup:
    """Grids, phantom and illuminations for one resolution."""

    grid: object
    angles: object
    kernel: object
    phantom: object
    coeffs: object
    sources: list


def build_setup(config: ExperimentConfig, grid_shape) -> Setup:
    grid = build_grid(RADIUS, *grid_shape)
    angles = build_angular_grid(config.n_dir)
    kernel = hg_kernel(ANISOTROPY, angles)
    phantom = build_phantom(config.template, grid, config.t1_eta_third)
    sources = [
        boundary_patch_source(
            grid,
            angles,
            pos,
            half_width=config.source_half_width,
            cone_deg=config.source_cone_deg,
            floor=config.source_floor,
        )
        for pos in SOURCE_POSITIONS[: config.measurements]
    ]
    return Setup(grid, angles, kernel, phantom, phantom.coefficients(kernel), sources)


def _manifest(config: ExperimentConfig, files: list) -> dict:
    man = {
        "format": 1,
        "template": config.template,
        "t1_eta_third": config.t1_eta_third,
        "radius": RADIUS,
        "anisotropy": ANISOTROPY,
        "forward_grid": list(config.forward_grid),
        "inverse_grid": list(config.grid),
        "n_dir": config.n_dir,
        "measurements": config.measurements,
        "seed": config.effective_seed,
        "sources": [
            {
                "position": list(pos),
                "half_width": config.source_half_width,
                "cone_deg": config.source_cone_deg,
                "floor": config.source_floor,
            }
            for pos in SOURCE_POSITIONS[: config.measurements]
        ],
        "solver": {"tol": config.tol, "max_sweeps": config.max_sweeps, "method": config.solver},
        "files": files,
    }
    if config.noise > 0:
        man["noise"] = {"level": config.noise, "model": "h*(1+eps*N(0,1))", "seed": config.effective_seed}
    return man


def config_from_manifest(manifest: dict, **overrides) -> ExperimentConfig:
    src = manifest["sources"][0]
    kwargs = dict(
        template=manifest["template"],
        t1_eta_third=manifest["t1_eta_third"],
        forward_grid=tuple(manifest["forward_grid"]),
        grid=tuple(manifest["inverse_grid"]),
        n_dir=manifest["n_dir"],
        measurements=manifest["measurements"],
        seed=manifest["seed"],
        noise=manifest.get("noise", {}).get("level", 0.0),
        tol=manifest["solver"]["tol"],
        max_sweeps=manifest["solver"]["max_sweeps"],
        solver=manifest["solver"]["method"],
        source_half_width=src["half_width"],
        source_cone_deg=src["cone_deg"],
        source_floor=src["floor"],
    )
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


def read_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / MANIFEST).read_text())


def generate_dataset(config: ExperimentConfig, data_dir=None) -> tuple[MeasurementSet, dict]:
    """Fine-grid forward solves, nearest-cell restriction, seeded noise.

    Writes ``h_<s>.csv`` per illumination plus ``manifest.json`` into
    ``data_dir`` (default ``<out>/data``).  Solver failures propagate.
    """
    data_dir = Path(data_dir if data_dir is not None else Path(config.out) / "data")
    fine = build_setup(config, config.forward_grid)
    coarse = build_setup(config, config.grid)
    h_fine = forward_map(fine.phantom.mu_a_xf_true, fine.coeffs, fine.sources, config.solver_options)
    data = []
    for s, h in enumerate(h_fine):
        h = restrict_nearest(h, coarse.grid)
        data.append(add_noise(h, config.noise, [config.effective_seed, s]))
    files = [f"h_{s}.csv" for s in range(config.measurements)]
    data_dir.mkdir(parents=True, exist_ok=True)
    for name, h in zip(files, data):
        write_field_csv(data_dir / name, h)
    manifest = _manifest(config, files)
    (data_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return MeasurementSet(coarse.sources, data, config.noise, config.effective_seed), manifest


def load_dataset(data_dir, config: ExperimentConfig | None = None):
    """Read a generated dataset; returns ``(config, setup, measurements)``.

    Data-defining settings come from the manifest; run settings (method,
    iterations, tolerances of the inversion, output) from ``config``.
    """
    manifest = read_manifest(data_dir)
    run_fields = {
        "method", "iters", "out", "fast", "sim_eps1", "hybrid_eps1",
        "opt_eps1", "opt_eps2", "bb_variant", "sim_envelope",
    }
    overrides = {} if config is None else {k: getattr(config, k) for k in run_fields}
    cfg = config_from_manifest(manifest, **overrides)
    setup = build_setup(cfg, cfg.grid)
    data = [read_field_csv(Path(data_dir) / name, setup.grid) for name in manifest["files"]]
    return cfg, setup, MeasurementSet(setup.sources, data, cfg.noise, cfg.effective_seed)


# ----------------------------------------------------------------------------
# reconstruction runs

SUMMARY_COLUMNS = [
    "template", "method", "measurements", "noise", "eps_f", "iterations",
    "solves", "status", "profile", "seed",
]


@dataclass
class RunOutcome:
    config: ExperimentConfig
    result: object
    summary: dict
    out_dir: Path

    @property
    def exit_code(self) -> int:
        status = self.result.status
        if "solver_error" in status:
            return 2
        if "step_search" in status:
            return 3
        if self.config.method == "sim" and not self.result.converged:
            return 3
        return 0


def reconstruct(config: ExperimentConfig, setup: Setup, data: MeasurementSet):
    mu_true = setup.phantom.mu_a_xf_true
    coeffs = setup.coeffs
    opts = config.solver_options
    if config.method == "sim":
        return run_sim(
            coeffs, data, eps1=config.sim_eps1, max_iter=config.iters,
            mu_true=mu_true, options=opts, envelope=config.sim_envelope,
        )
    if config.method == "opt":
        mu0 = ScalarField.constant(setup.grid, coeffs.c1)
        try:
            return run_opt(
                mu0, coeffs, data, eps1=config.opt_eps1, eps2=config.opt_eps2,
                max_iter=config.iters, mu_true=mu_true, options=opts, variant=config.bb_variant,
            )
        except StepSearchError as exc:
            log.error("%s", exc)
            return exc.partial
    hcfg = HybridConfig(
        eps1=config.hybrid_eps1, eps2=config.opt_eps1, eps3=config.opt_eps2,
        sim_max_iter=config.iters, opt_max_iter=config.iters, total_budget=config.iters,
        variant=config.bb_variant, envelope=config.sim_envelope,
    )
    return run_hybrid(coeffs, data, hcfg, mu_true=mu_true, options=opts)


def write_summary(path, summary: dict) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerow(summary)


def run_experiment(config: ExperimentConfig, data_dir=None) -> RunOutcome:
    """Generate (unless ``data_dir`` is given) and reconstruct.

    Writes ``trace.csv``, ``mu_a_xf.csv`` (plus ``mu_a_xf_upper.csv`` for
    SIM) and ``summary.csv`` into ``config.out``.  Non-convergence is
    recorded in the summary status; solver failures during generation
    propagate.
    """
    out = Path(config.out)
    if data_dir is None:
        data_dir = out / "data"
        generate_dataset(config, data_dir)
    config, setup, data = load_dataset(data_dir, config)
    result = reconstruct(config, setup, data)
    out.mkdir(parents=True, exist_ok=True)
    result.trace.to_csv(out / "trace.csv")
    write_field_csv(out / "mu_a_xf.csv", result.mu)
    if config.method == "sim" and result.upper is not None:
        write_field_csv(out / "mu_a_xf_upper.csv", result.upper)
    summary = {
        "template": config.template,
        "method": config.method,
        "measurements": config.measurements,
        "noise": config.noise,
        "eps_f": repr(relative_error(result.mu, setup.phantom.mu_a_xf_true)),
        "iterations": result.trace.rows[-1].iter if len(result.trace) else 0,
        "solves": result.solves,
        "status": result.status,
        "profile": config.profile,
        "seed": config.effective_seed,
    }
    write_summary(out / "summary.csv", summary)
    log.info(
        "template %d %s S=%d eps=%g: eps_f=%s (%s)",
        config.template, config.method, config.measurements, config.noise,
        summary["eps_f"], result.status,
    )
    return RunOutcome(config, result, summary, out)


# ----------------------------------------------------------------------------
# full matrix


def matrix_configs(base: ExperimentConfig, methods=REPORT_METHODS, templates=(1, 2),
                   noises=NOISE_LEVELS, measurements=(1, 2, 3, 4)) -> list:
    root = Path(base.out)
    cells = []
    for t in templates:
        for eps in noises:
            for S in measurements:
                for m in methods:
                    cells.append(
                        replace(
                            base, template=t, noise=eps, measurements=S, method=m, seed=None,
                            out=str(root / f"t{t}_e{eps:g}_s{S}_{m}"),
                        )
                    )
    return cells


def _data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out).parent / f"data_t{cfg.template}_e{cfg.noise:g}_s{cfg.measurements}"


def _generate_cell(cfg: ExperimentConfig) -> str:
    d = _data_dir(cfg)
    generate_dataset(cfg, d)
    return str(d)


def _run_cell(cfg: ExperimentConfig) -> dict:
    return run_experiment(cfg, _data_dir(cfg)).summary


def run_matrix(base: ExperimentConfig, jobs: int = 1, **selection) -> list:
    """Run every (template, noise, S, method) cell; one dataset per data tuple.

    Cells are independent and write to their own directories, so ``jobs > 1``
    runs them in worker processes.  Returns summaries in cell order.
    """
    cells = matrix_configs(base, **selection)
    unique = {}
    for cfg in cells:
        unique.setdefault(_data_dir(cfg), cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_generate_cell, unique.values()))
            return list(pool.map(_run_cell, cells))
    for cfg in unique.values():
        _generate_cell(cfg)
    return [_run_cell(cfg) for cfg in cells]


# ----------------------------------------------------------------------------
# report

REPORT_S = (1, 2, 3, 4)
SLACK = 0.10
PARITY = 0.02
TARGET_S4 = 0.12


@dataclass
class Report:
    tables: dict  # template -> {(S, noise, method): eps_f}
    warnings: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    profiles: dict = field(default_factory=dict)  # (template, noise, S, method) -> profile

    @staticmethod
    def columns():
        return [(eps, m) for eps in NOISE_LEVELS for m in REPORT_METHODS]

    def value(self, template, S, noise, method):
        return self.tables.get(template, {}).get((S, noise, method))

    def format(self) -> str:
        lines = []
        for t in sorted(self.tables):
            lines.append(f"template {t}: relative error eps_f of mu_a_xf")
            head = ["S"] + [f"eps={eps:g}/{m}" for eps, m in self.columns()]
            lines.append("  ".join(f"{h:>14}" for h in head))
            for S in REPORT_S:
                cells = [f"{S:>14}"]
                for eps, m in self.columns():
                    v = self.value(t, S, eps, m)
                    cells.append(f"{'—' if v is None else f'{v:.3e}':>14}")
                lines.append("  ".join(cells))
            lines.append("")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        for v in self.violations:
            lines.append(f"ORDERING VIOLATION: {v}")
        if not self.violations:
            lines.append("ordering checks: no violations")
        return "\n".join(lines)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["template", "S"] + [f"eps{eps:g}_{m}" for eps, m in self.columns()])
            for t in sorted(self.tables):
                for S in REPORT_S:
                    row = [t, S]
                    for eps, m in self.columns():
                        v = self.value(t, S, eps, m)
                        row.append("" if v is None else repr(v))
                    writer.writerow(row)


def _summary_files(paths) -> list:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found = sorted(p.rglob("summary.csv"), key=lambda f: (f.stat().st_mtime_ns, str(f)))
            files.extend(found)
        else:
            files.append(p)
    return files


def _match_noise(value: float):
    for eps in NOISE_LEVELS:
        if abs(value - eps) < 1e-12:
            return eps
    return None


def report(paths) -> Report:
    """Assemble Table-shaped results from summary files and check orderings.

    Directories are searched recursively for ``summary.csv``; later lines
    overwrite earlier ones for the same cell (with a warning).
    """
    tables = {1: {}, 2: {}}
    profiles = {}
    rep = Report(tables)
    for path in _summary_files(paths):
        with path.open(newline="") as fh:
            for rec in csv.DictReader(fh):
                t, m = int(rec["template"]), rec["method"]
                S, eps = int(rec["measurements"]), _match_noise(float(rec["noise"]))
                if m not in REPORT_METHODS or eps is None or t not in tables:
                    rep.warnings.append(f"{path}: skipped {m} run at noise {rec['noise']} (not a table cell)")
                    continue
                key = (S, eps, m)
                if key in tables[t]:
                    rep.warnings.append(f"duplicate cell template {t} S={S} eps={eps:g} {m}: {path} wins")
                tables[t][key] = float(rec["eps_f"])
                profiles[(t, eps, S, m)] = rec.get("profile", "custom")
    rep.profiles = profiles
    for t in sorted(tables):
        missing = [
            f"S={S}/eps={eps:g}/{m}"
            for S in REPORT_S
            for eps, m in Report.columns()
            if (S, eps, m) not in tables[t]
        ]
        if missing:
            rep.warnings.append(f"template {t}: {len(missing)} gaps ({', '.join(missing[:6])}{', ...' if len(missing) > 6 else ''})")
    rep.violations = check_orderings(rep)
    return rep


def check_orderings(rep: Report) -> list:
    out = []
    for t, cells in rep.tables.items():
        for eps in NOISE_LEVELS:
            for m in REPORT_METHODS:
                for S in REPORT_S[:-1]:
                    a, b = cells.get((S, eps, m)), cells.get((S + 1, eps, m))
                    if a is not None and b is not None and b > (1 + SLACK) * a:
                        out.append(f"(a) template {t} eps={eps:g} {m}: S={S + 1} {b:.3e} > 1.1 x S={S} {a:.3e}")
            h, o = cells.get((1, eps, "hybrid")), cells.get((1, eps, "opt"))
            if h is not None and o is not None and h > o:
                out.append(f"(b) template {t} eps={eps:g} S=1: hybrid {h:.3e} > opt {o:.3e}")
            for S in (3, 4):
                h, o = cells.get((S, eps, "hybrid")), cells.get((S, eps, "opt"))
                if h is not None and o is not None and abs(h - o) > PARITY:
                    out.append(f"(c) template {t} eps={eps:g} S={S}: |hybrid - opt| = {abs(h - o):.3e}")
        for m in REPORT_METHODS:
            v = cells.get((4, 0.0, m))
            if v is not None and rep.profiles.get((t, 0.0, 4, m)) == "default" and v >= TARGET_S4:
                out.append(f"(d) template {t} noise-free S=4 {m}: {v:.3e} >= {TARGET_S4}")
    return out


def worker_count(requested: int | None) -> int:
    if requested is None or requested <= 0:
        return max(1, os.cpu_count() or 1)
    return requested
