"""Command line entry point: ``run``, ``mesh-gen`` and ``check``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .ale_forms import DegenerateMapError
from .mesh import MeshError, generate_cvt, global_mesh_size, save_mesh
from .moving_mesh_pme import PmeError
from .presets import ForcingCheckError
from .runner import ConfigError, load_config, run_experiment
from .time_integration import SolverError

log = logging.getLogger("alevem")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MESH = 4
EXIT_FORCING = 5
EXIT_NUMERICAL = 6
EXIT_IO = 7
EXIT_LEVEL_FAILED = 8
EXIT_CHECK_FAILED = 9

# most specific first
ERROR_CODES = (
    (ConfigError, EXIT_CONFIG),
    (MeshError, EXIT_MESH),
    (ForcingCheckError, EXIT_FORCING),
    (DegenerateMapError, EXIT_NUMERICAL),
    (SolverError, EXIT_NUMERICAL),
    (PmeError, EXIT_NUMERICAL),
    (OSError, EXIT_IO),
)


def exit_code_for(exc):
    for cls, code in ERROR_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _cmd_run(args):
    text = Path(args.config).read_text()
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    outcome = run_experiment(cfg, config_text=text)
    if outcome.csv_path is not None:
        sys.stdout.write(outcome.csv_path.read_text())
    print(f"manifest: {outcome.manifest_path}")
    if outcome.failed_levels:
        for lv in outcome.failed_levels:
            print(f"level {lv.index} failed: {lv.error}", file=sys.stderr)
        return EXIT_LEVEL_FAILED
    return EXIT_OK


def _cmd_mesh_gen(args):
    mesh = generate_cvt(args.cells, lloyd_iterations=args.lloyd, rng_seed=args.seed)
    save_mesh(mesh, args.out)
    print(f"{mesh.n_elements} cells, {mesh.n_vertices} vertices, h = {global_mesh_size(mesh):.4f} -> {args.out}")
    return EXIT_OK


def _cmd_check(args):
    from .checks import run_checks

    results = run_checks(report=lambda r: print(r.line(), flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="alevem", description="ALE virtual element experiments")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from an INI config")
    run.add_argument("--config", required=True)
    run.add_argument("--output-dir", default=None, help="override output_dir from the config")
    run.set_defaults(func=_cmd_run)

    mg = sub.add_parser("mesh-gen", help="write a Lloyd-relaxed Voronoi mesh of the unit square")
    mg.add_argument("--cells", type=int, required=True)
    mg.add_argument("--seed", type=int, default=0)
    mg.add_argument("--lloyd", type=int, default=150, help="Lloyd iterations")
    mg.add_argument("--out", required=True)
    mg.set_defaults(func=_cmd_mesh_gen)

    ck = sub.add_parser("check", help="run the invariant suite")
    ck.set_defaults(func=_cmd_check)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
