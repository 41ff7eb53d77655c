"""Command-line entry point: ``fpat {phantom,generate,reconstruct,report,matrix}``.

Exit codes: 0 success, 1 usage error, 2 solver failure, 3 non-convergence
(outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import (
    build_setup,
    config_from_manifest,
    generate_dataset,
    read_config_file,
    report,
    resolve_config,
    run_experiment,
    run_matrix,
    worker_count,
)
from .geometry import write_field_csv
from .transport import SolverError

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_NONCONVERGED = 0, 1, 2, 3

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _experiment_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment")
    g.add_argument("--config", metavar="FILE", help="flat key=value file; flags override it")
    g.add_argument("--template", type=int, choices=(1, 2))
    g.add_argument("--noise", type=float, help="relative noise level eps (0, 0.02, 0.05)")
    g.add_argument("--measurements", type=int, choices=(1, 2, 3, 4))
    g.add_argument("--method", choices=("sim", "opt", "hybrid"))
    g.add_argument("--iters", type=int, help="iteration budget (default 50)")
    g.add_argument("--grid", type=int, nargs=2, metavar=("NX", "NY"), help="inverse grid")
    g.add_argument("--forward-grid", type=int, nargs=2, metavar=("NX", "NY"),
                   help="data-generation grid (default 1.5x the inverse grid)")
    g.add_argument("--ndir", type=int, help="number of discrete ordinates")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", metavar="DIR")
    g.add_argument("--fast", action="store_true", default=None,
                   help="48^2/32^2 grids with 16 directions")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fpat", description="Quantitative fluorescence photoacoustic tomography experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _experiment_flags()

    sub.add_parser("phantom", parents=[common], help="write the template coefficient fields")
    gen = sub.add_parser("generate", parents=[common], help="synthesize a dataset")
    gen.add_argument("--manifest", metavar="FILE", help="regenerate from an existing manifest")
    rec = sub.add_parser("reconstruct", parents=[common], help="run one reconstruction")
    rec.add_argument("--data", metavar="DIR", help="use an existing dataset instead of generating")
    rep = sub.add_parser("report", help="tabulate summary files")
    rep.add_argument("paths", nargs="*", help="summary.csv files or directories")
    rep.add_argument("--out", metavar="FILE", help="also write the table as CSV")
    mat = sub.add_parser("matrix", parents=[common], help="run the full template x noise x S x method matrix")
    mat.add_argument("--jobs", type=int, default=1, help="worker processes (0 = all cores)")
    return parser


_FLAG_KEYS = {
    "template": "template",
    "noise": "noise",
    "measurements": "measurements",
    "method": "method",
    "iters": "iters",
    "grid": "grid",
    "forward_grid": "forward_grid",
    "ndir": "ndir",
    "seed": "seed",
    "out": "out",
    "fast": "fast",
}


def _config(args):
    file_values = read_config_file(args.config) if args.config else {}
    flags = {key: getattr(args, dest) for dest, key in _FLAG_KEYS.items()}
    return resolve_config(file_values, flags)


def cmd_phantom(args) -> int:
    cfg = _config(args)
    setup = build_setup(cfg, cfg.grid)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ph = setup.phantom
    for name, fld in (
        ("mu_a_xf", ph.mu_a_xf_true),
        ("eta", ph.eta_true),
        ("mu_a_xi", ph.mu_a_xi),
        ("mu_a_m", ph.mu_a_m),
        ("mu_s", ph.mu_s_x),
    ):
        write_field_csv(out / f"{name}.csv", fld)
    print(f"template {cfg.template} on {cfg.grid[0]}x{cfg.grid[1]} -> {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.manifest:
        cfg = config_from_manifest(json.loads(Path(args.manifest).read_text()))
        out = Path(args.out) if args.out else Path(args.manifest).parent
    else:
        cfg = _config(args)
        out = Path(cfg.out) / "data"
    _, manifest = generate_dataset(cfg, out)
    print(f"wrote {len(manifest['files'])} data files and {out / 'manifest.json'}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    outcome = run_experiment(cfg, args.data)
    s = outcome.summary
    print(
        f"template={s['template']} method={s['method']} S={s['measurements']} "
        f"noise={s['noise']} eps_f={float(s['eps_f']):.4e} iters={s['iterations']} "
        f"status={s['status']}"
    )
    return outcome.exit_code


def cmd_report(args) -> int:
    rep = report(args.paths)
    print(rep.format())
    if args.out:
        rep.to_csv(args.out)
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg = _config(args)
    summaries = run_matrix(cfg, jobs=worker_count(args.jobs))
    rep = report([cfg.out])
    print(rep.format())
    rep.to_csv(Path(cfg.out) / "report.csv")
    (Path(cfg.out) / "matrix.json").write_text(json.dumps(summaries, indent=1) + "\n")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "report": cmd_report,
    "matrix": cmd_matrix,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"fpat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SolverError as exc:
        print(f"fpat: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
