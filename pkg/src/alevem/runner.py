"""Config-driven experiment runs: mesh sequences, CSV tables, manifests, snapshots."""
from __future__ import annotations

import configparser
import hashlib
import logging
import os
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .analysis import EocTable, ErrorReport, eoc, h1_error, l1_mesh_error, l1_solution_error, l2_error
from .mesh import generate_cvt, generate_disk_cvt, global_mesh_size, load_mesh, save_mesh
from .moving_mesh_pme import SimilaritySolution, run_pme
from .presets import FINAL_TIME, MOTIONS, PROBLEMS, Experiment, check_forcing
from .time_integration import run_simulation
from .vem_core import VemSpace

log = logging.getLogger(__name__)

CONVECTION_EXPERIMENTS = ("ce_static", "warped_square", "ce_linear", "vorticial", "oscillating")
PME_EXPERIMENTS = ("pme", "pme_weak")
EXPERIMENTS = CONVECTION_EXPERIMENTS + PME_EXPERIMENTS + ("custom",)
REFINEMENT_FACTOR = 4


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    k: int
    theta: float = 0.5
    T: float = FINAL_TIME
    dt0: Optional[float] = None
    mesh_levels: Union[int, List[str]] = 4
    rng_seed: int = 0
    output_dir: str = "results"
    export_snapshots: bool = False
    snapshot_times: List[float] = field(default_factory=list)
    base_cells: Optional[int] = None
    lloyd_iterations: int = 150
    # custom runs pick a motion and a problem from the presets
    motion: Optional[str] = None
    problem: Optional[str] = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.k not in (1, 2, 3):
            raise ConfigError(f"k must be 1, 2 or 3, got {self.k}")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        if not self.T > 0.0:
            raise ConfigError(f"T must be positive, got {self.T}")
        if self.dt0 is not None and not self.dt0 > 0.0:
            raise ConfigError(f"dt0 must be positive, got {self.dt0}")
        n = self.mesh_levels if isinstance(self.mesh_levels, int) else len(self.mesh_levels)
        if n < 1:
            raise ConfigError("mesh_levels must be at least 1")
        if self.experiment == "custom":
            if self.motion not in MOTIONS or self.problem not in PROBLEMS:
                raise ConfigError(f"custom runs need motion and problem from {sorted(MOTIONS)}")
        if self.export_snapshots and not self.snapshot_times:
            self.snapshot_times = [self.T]

    @property
    def is_pme(self):
        return self.experiment in PME_EXPERIMENTS

    @property
    def time_step0(self):
        if self.dt0 is not None:
            return self.dt0
        return 1e-4 if self.is_pme else 1e-3

    @property
    def cells0(self):
        if self.base_cells is not None:
            return self.base_cells
        return 60 if self.is_pme else 100

    def echo(self):
        """Flat key = value lines in field order."""
        lines = []
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{name} = {'' if v is None else v}")
        return "\n".join(lines)


_INT_KEYS = ("k", "rng_seed", "lloyd_iterations", "base_cells")
_FLOAT_KEYS = ("theta", "T", "dt0")


def parse_config(text):
    """Read an ExperimentConfig from INI text with an ``[experiment]`` section."""
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys are case sensitive (T)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if "experiment" not in cp:
        raise ConfigError("config needs an [experiment] section")
    sec = dict(cp["experiment"])
    unknown = set(sec) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kw = {}
    try:
        for key, raw in sec.items():
            raw = raw.strip()
            if key in _INT_KEYS:
                kw[key] = int(raw)
            elif key in _FLOAT_KEYS:
                kw[key] = float(raw)
            elif key == "export_snapshots":
                kw[key] = cp["experiment"].getboolean(key)
            elif key == "snapshot_times":
                kw[key] = [float(s) for s in raw.replace(",", " ").split()]
            elif key == "mesh_levels":
                kw[key] = int(raw) if raw.isdigit() else [s.strip() for s in raw.split(",") if s.strip()]
            else:
                kw[key] = raw
    except ValueError as exc:
        raise ConfigError(f"bad value in config: {exc}") from exc
    if "experiment" not in kw or "k" not in kw:
        raise ConfigError("config needs at least `experiment` and `k`")
    return ExperimentConfig(**kw)


def load_config(path):
    return parse_config(Path(path).read_text())


def git_blob_hash(data):
    """sha1 of ``blob <len>\\0<data>``, as git computes object ids."""
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# --------------------------------------------------------------------------
# tables


def _fmt(v):
    return "" if v is None else f"{v:.3e}"


def emit_tables(reports: Sequence[ErrorReport], path=None, table: Optional[EocTable] = None):
    """CSV text of the error table with pairwise and fitted rates.

    Each row after the first carries the rate against the row above; a
    final ``fitted`` row holds the least-squares slopes. Values use four
    significant digits. Written to ``path`` when given.
    """
    if not reports:
        raise ValueError("no error reports to tabulate")
    if table is None:
        table = EocTable(list(reports))
        eoc(table)
    cols = table.columns
    header = ["level", "h", "dofs"] + cols + [f"rate_{c}" for c in cols]
    lines = [",".join(header)]
    for i, r in enumerate(table.rows):
        cells = [str(i), _fmt(r.h), str(r.dofs)] + [_fmt(getattr(r, c)) for c in cols]
        cells += ["" if i == 0 else _fmt(table.rates[c][i - 1]) for c in cols]
        lines.append(",".join(cells))
    lines.append(",".join(["fitted", "", ""] + [""] * len(cols) + [_fmt(table.fitted[c]) for c in cols]))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


# --------------------------------------------------------------------------
# snapshots


def export_snapshot(rho, ale, space, path, title="alevem snapshot"):
    """Legacy VTK unstructured grid of mapped polygons.

    Points are the mapped mesh vertices, edges are drawn straight. Point
    data holds the vertex values of ``rho``; cell data holds the
    j-weighted mean of Pi0 rho over each physical cell.
    """
    mesh = space.mesh
    rho = np.asarray(rho, dtype=float)
    nv = mesh.n_vertices
    pts = ale.map_dofs[:nv]
    vals = space.pi_zero_at_quadrature(rho)
    mean = np.empty(mesh.n_elements)
    for g, geo, v in zip(space.groups, ale.geometry, vals):
        wj = g.qw * geo.det
        mean[g.elements] = (wj * v).sum(axis=1) / wj.sum(axis=1)
    cells = mesh.elements
    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    out += [f"{x:.17g} {y:.17g} 0" for x, y in pts]
    size = sum(len(c) + 1 for c in cells)
    out.append(f"CELLS {len(cells)} {size}")
    out += [" ".join(str(int(i)) for i in [len(c), *c]) for c in cells]
    out.append(f"CELL_TYPES {len(cells)}")
    out += ["7"] * len(cells)  # VTK_POLYGON
    out += [f"POINT_DATA {nv}", "SCALARS rho double 1", "LOOKUP_TABLE default"]
    out += [f"{v:.17g}" for v in rho[:nv]]
    out += [f"CELL_DATA {len(cells)}", "SCALARS rho_mean double 1", "LOOKUP_TABLE default"]
    out += [f"{v:.17g}" for v in mean]
    Path(path).write_text("\n".join(out) + "\n")


# --------------------------------------------------------------------------
# runs


@dataclass
class LevelRecord:
    index: int
    mesh_source: str
    mesh_hash: str
    report: Optional[ErrorReport] = None
    error: Optional[str] = None
    runtime: float = 0.0


@dataclass
class RunOutcome:
    config: ExperimentConfig
    table: Optional[EocTable]
    levels: List[LevelRecord]
    csv_path: Optional[Path]
    manifest_path: Path
    forcing_error: Optional[float] = None

    @property
    def failed_levels(self):
        return [lv for lv in self.levels if lv.error is not None]


def _mesh_cache_name(cfg, n):
    kind = "disk" if cfg.is_pme else "square"
    return f"cvt_{kind}_n{n}_seed{cfg.rng_seed}_lloyd{cfg.lloyd_iterations}.txt"


def level_meshes(cfg, mesh_dir=None):
    """(mesh, source, content hash) for every level; generated meshes are cached."""
    out = []
    if isinstance(cfg.mesh_levels, list):
        for p in cfg.mesh_levels:
            text = Path(p).read_text()
            out.append((load_mesh(p), str(p), git_blob_hash(text)))
        return out
    mesh_dir = Path(cfg.output_dir) / "meshes" if mesh_dir is None else Path(mesh_dir)
    mesh_dir.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.mesh_levels):
        n = cfg.cells0 * REFINEMENT_FACTOR ** i
        path = mesh_dir / _mesh_cache_name(cfg, n)
        if not path.exists():
            if cfg.is_pme:
                mesh = generate_disk_cvt(n, lloyd_iterations=cfg.lloyd_iterations, rng_seed=cfg.rng_seed)
            else:
                mesh = generate_cvt(n, lloyd_iterations=cfg.lloyd_iterations, rng_seed=cfg.rng_seed)
            tmp = path.with_suffix(".tmp")
            save_mesh(mesh, tmp)
            os.replace(tmp, path)
        out.append((load_mesh(path), f"generated n_seeds={n}", git_blob_hash(path.read_bytes())))
    return out


def _resolve_experiment(cfg):
    motion = cfg.motion if cfg.experiment == "custom" else cfg.experiment
    problem = cfg.problem if cfg.experiment == "custom" else cfg.experiment
    return Experiment(cfg.experiment, PROBLEMS[problem](), MOTIONS[motion]())


def _snapshot_hook(cfg, out_dir, level, space, start):
    pending = sorted(t for t in cfg.snapshot_times)
    if not cfg.export_snapshots:
        return None, pending

    def hook(t, rho, ale):
        while pending and t >= pending[0] + start - 1e-12:
            ts = pending.pop(0)
            export_snapshot(rho, ale, space, out_dir / f"snapshot_L{level}_t{ts:.6g}.vtk")

    return hook, pending


def _run_convection_level(cfg, exp, mesh, h, h0, level, out_dir):
    space = VemSpace(mesh, cfg.k)
    dt = cfg.time_step0 * (h / h0) ** ((cfg.k + 1) / 2)
    hook, _ = _snapshot_hook(cfg, out_dir, level, space, 0.0)
    cb = None if hook is None else (lambda step, t, rho, ale: hook(t, rho, ale))
    res = run_simulation(exp.problem, exp.motion, space, cfg.k, cfg.theta, cfg.T, dt, callback=cb)
    exact = lambda x: exp.problem.exact(x, res.t)
    return ErrorReport(
        h=h,
        dofs=space.n_dofs,
        l2=l2_error(res.rho, exact, res.ale),
        h1=h1_error(res.rho, exact, res.ale),
        steps=res.n_steps,
        dt=dt,
    )


def _run_pme_level(cfg, mesh, h, h0, level, out_dir):
    space = VemSpace(mesh, cfg.k)
    sol = SimilaritySolution()
    dt = cfg.time_step0 * (h / h0) ** (cfg.k + 1)
    hook, _ = _snapshot_hook(cfg, out_dir, level, space, sol.t0)
    cb = None if hook is None else (lambda step, st: hook(st.t_n, st.rho, st.ale))
    res = run_pme(space, dt, duration=cfg.T, sol=sol, strong=cfg.experiment == "pme", callback=cb)
    st = res.state
    m0, m1 = res.mass_history[0][1], res.mass_history[-1][1]
    log.info("level %d mass drift %.2e", level, (m1 - m0) / m0)
    return ErrorReport(
        h=h,
        dofs=space.n_dofs,
        l1_sol=l1_solution_error(st.rho, lambda x: sol.density(x, st.t_n), st.ale),
        l1_mesh=l1_mesh_error(st.ale, float(sol.front(st.t_n))),
        steps=res.n_steps,
        dt=dt,
    )


def _write_manifest(path, cfg, config_hash, levels, forcing_error, total):
    lines = ["[config]", cfg.echo(), "", "[inputs]", f"config_hash = {config_hash}"]
    for lv in levels:
        lines.append(f"mesh_{lv.index} = {lv.mesh_hash}  ({lv.mesh_source})")
    lines += ["", "[checks]", f"forcing_check = {'skipped' if forcing_error is None else f'{forcing_error:.2e}'}"]
    lines += ["", "[levels]"]
    for lv in levels:
        if lv.error is None:
            r = lv.report
            lines.append(f"level_{lv.index} = ok h={r.h:.6g} dofs={r.dofs} steps={r.steps} dt={r.dt:.6g} "
                         f"runtime={lv.runtime:.2f}s")
        else:
            lines.append(f"level_{lv.index} = FAILED runtime={lv.runtime:.2f}s error={lv.error}")
    lines += ["", f"total_runtime = {total:.2f}s"]
    Path(path).write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig, mesh_dir=None, config_text=None):
    """Run every mesh level and write ``table.csv`` and ``manifest.txt``.

    A failing level is recorded in the manifest and skipped; the table is
    built from the levels that finished. The forcing of the preset problem
    is checked against finite differences before anything runs.
    """
    t_start = time.perf_counter()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_hash = git_blob_hash(config_text if config_text is not None else cfg.echo())
    exp = None
    forcing_error = None
    if not cfg.is_pme:
        exp = _resolve_experiment(cfg)
        forcing_error = check_forcing(exp.problem)
    meshes = level_meshes(cfg, mesh_dir)
    hs = [global_mesh_size(m) for m, _, _ in meshes]
    levels = []
    for i, ((mesh, src, digest), h) in enumerate(zip(meshes, hs)):
        rec = LevelRecord(i, src, digest)
        t0 = time.perf_counter()
        try:
            if cfg.is_pme:
                rec.report = _run_pme_level(cfg, mesh, h, hs[0], i, out_dir)
            else:
                rec.report = _run_convection_level(cfg, exp, mesh, h, hs[0], i, out_dir)
        except Exception as exc:  # recorded per level; the run continues
            rec.error = f"{type(exc).__name__}: {exc}"
            log.error("level %d failed: %s", i, rec.error)
            log.debug(traceback.format_exc())
        rec.runtime = time.perf_counter() - t0
        if rec.report is not None:
            rec.report.runtime = rec.runtime
        levels.append(rec)
        log.info("%s k=%d level %d done in %.1fs", cfg.experiment, cfg.k, i, rec.runtime)

    reports = [lv.report for lv in levels if lv.report is not None]
    table, csv_path = None, None
    if reports:
        table = EocTable(reports)
        eoc(table)
        csv_path = out_dir / "table.csv"
        emit_tables(reports, csv_path, table)
    manifest = out_dir / "manifest.txt"
    _write_manifest(manifest, cfg, config_hash, levels, forcing_error, time.perf_counter() - t_start)
    return RunOutcome(cfg, table, levels, csv_path, manifest, forcing_error)
