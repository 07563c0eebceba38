"""Command-line interface: ``efg3d generate | run | verify | audit``.

Exit codes
    0  success (run converged / all verification bands met)
    1  verification band failed, or input/configuration error
    2  run did not converge within the step budget; also argparse usage errors
    3  run diverged or produced an inverted configuration
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .approx import EPS_MACHINE_SQRT, ApproxParams, gradient_check, kronecker_audit, shape_at_points, support_for
from .cloud import gauss_points, generate_cube_grid, generate_cylinder_grid, load_model_dir, save_grid
from .config import PRESETS, load_config, preset
from .errors import EFGError
from .solver import CONVERGED, DIVERGED, INVERTED, NOT_CONVERGED

EXIT_OK, EXIT_FAIL, EXIT_NOT_CONVERGED, EXIT_DIVERGED = 0, 1, 2, 3

STATUS_EXIT = {CONVERGED: EXIT_OK, NOT_CONVERGED: EXIT_NOT_CONVERGED, DIVERGED: EXIT_DIVERGED,
               INVERTED: EXIT_DIVERGED}

log = logging.getLogger("efg3d")


def _common(suppress=False):
    # subcommand copies suppress their defaults so flags given before the
    # subcommand are not overwritten
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--workers", type=_positive_int, default=d(1), help="threads for internal-force evaluation")
    p.add_argument("--deterministic", action="store_true", default=d(False),
                   help="bitwise-identical results for any worker count")
    p.add_argument("--out", default=d(None), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nodes_per_edge(text):
    v = int(text)
    if v < 2:
        raise argparse.ArgumentTypeError(f"nodes per edge must be at least 2, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def build_parser():
    common = _common(suppress=True)
    ap = argparse.ArgumentParser(prog="efg3d", description=__doc__.split("\n")[0], parents=[_common()],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog="exit codes: 0 ok, 1 failed check/input error, 2 not converged "
                                        "(or usage error), 3 diverged/inverted")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a generated model to files")
    gs = g.add_subparsers(dest="shape", required=True)
    c = gs.add_parser("cube", parents=[common], help="regular lattice cube")
    c.add_argument("edge", type=_positive_float, help="edge length (m)")
    c.add_argument("nodes_per_edge", type=_nodes_per_edge)
    y = gs.add_parser("cylinder", parents=[common], help="layered cylinder along z")
    y.add_argument("height", type=_positive_float)
    y.add_argument("diameter", type=_positive_float)
    y.add_argument("spacing", type=_positive_float, help="target node spacing (m)")

    r = sub.add_parser("run", parents=[common], help="run a configuration file or a preset")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("config", nargs="?", help="YAML/JSON run configuration")
    src.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--level", type=_positive_int, default=1, help="cloud level for --preset")
    r.add_argument("--dt", type=_positive_float, help="override the time step (s)")
    r.add_argument("--max-steps", type=_positive_int)

    v = sub.add_parser("verify", parents=[common], help="run a benchmark and score it against references")
    v.add_argument("benchmark", choices=sorted(PRESETS), metavar="benchmark",
                   help="one of: " + ", ".join(sorted(PRESETS)))
    v.add_argument("level", type=_positive_int, nargs="?", default=1, help="cloud level (default 1)")
    v.add_argument("--nu", type=float, help="Poisson ratio (cube-torsion only)")
    v.add_argument("--no-figures", action="store_true")

    a = sub.add_parser("audit", parents=[common], help="interpolation and shape-function audit of a model")
    a.add_argument("model_dir")
    a.add_argument("--eps", type=float, default=1e-5, help="weight regularization parameter")
    a.add_argument("--samples", type=_positive_int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--no-figures", action="store_true")
    return ap


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args):
    out = Path(args.out or ".")
    if args.shape == "cube":
        cloud, grid = generate_cube_grid(args.edge, args.nodes_per_edge)
    else:
        cloud, grid = generate_cylinder_grid(args.height, args.diameter, args.spacing)
    paths = save_grid(cloud, grid, out)
    print(f"wrote {len(cloud)} nodes, {len(grid.cells)} cells to {out}")
    for k, p in paths.items():
        log.info("%s: %s", k, p)
    return EXIT_OK


def cmd_run(args):
    from .bench import execute

    cfg = load_config(args.config) if args.config else preset(args.preset, args.level)
    if args.dt is not None:
        cfg.solver.dt = args.dt
    if args.max_steps is not None:
        cfg.solver.max_steps = args.max_steps
    out = Path(args.out) if args.out else Path(cfg.output.directory)
    oc = execute(cfg, args.workers, args.deterministic, out)
    res = oc.result
    print(f"{cfg.name}: {res.status} ({res.message}); steps {res.state.step}, dt {res.dt:.3e} s, "
          f"c {res.damping:.3e} 1/s, {oc.seconds:.1f} s")
    print(f"final state: {oc.files['vtk']}\nsummary: {oc.files['summary']}")
    return STATUS_EXIT[res.status]


def cmd_verify(args):
    from .bench import verify_benchmark

    opts = {}
    if args.nu is not None:
        if args.benchmark != "cube-torsion":
            raise EFGError("--nu applies to cube-torsion only")
        opts["nu"] = args.nu
    out = Path(args.out or "out")
    bo = verify_benchmark(args.benchmark, args.level, out, args.workers, args.deterministic,
                          figures=not args.no_figures, **opts)
    res = bo.run.result
    print(f"{args.benchmark} cloud {args.level}: {res.status}, {res.state.step} steps, {bo.run.seconds:.1f} s")
    for c in bo.checks:
        mark = "PASS" if c.passed else "FAIL"
        detail = "" if c.label.startswith("status") else f" {c.value:.3e} (limit {c.limit:.3e})"
        print(f"  [{mark}] {c.label}{detail}")
    print(f"report: {bo.files['report']}")
    if res.status != CONVERGED:
        return STATUS_EXIT[res.status]
    return EXIT_OK if bo.passed else EXIT_FAIL


def cmd_audit(args):
    if args.eps <= EPS_MACHINE_SQRT:
        print(f"warning: eps = {args.eps:g} is below sqrt(machine precision) = {EPS_MACHINE_SQRT:.2e}; "
              "the regularized weight is numerically unreliable there", file=sys.stderr)
    cloud, grid = load_model_dir(args.model_dir)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        params = ApproxParams(eps=args.eps)
    audit = kronecker_audit(cloud, args.samples, params, seed=args.seed)
    gp = gauss_points(grid)
    batch = shape_at_points(gp.position, cloud, params)
    ids = np.where(batch.ids >= 0, batch.ids, 0)
    pou = float(np.abs(batch.phi.sum(1) - 1).max())
    lin = float(np.abs(np.einsum("nk,nkd->nd", batch.phi, cloud.coords[ids]) - gp.position).max())
    rng = np.random.default_rng(args.seed)
    picks = rng.choice(len(gp), size=min(100, len(gp)), replace=False)
    gc = max(gradient_check(gp.position[k], support_for(gp.position[k], cloud, params), cloud, params)
             for k in picks)
    ratio = audit.worst_ratio
    rows = [("kronecker_max_deviation", audit.max_deviation),
            ("kronecker_bound_max", float(audit.bound.max()) if audit.bound.size else 0.0),
            ("kronecker_worst_ratio", ratio),
            ("partition_of_unity_max", pou),
            ("linear_reproduction_max", lin),
            ("gradient_check_worst", gc)]
    print(f"model: {len(cloud)} nodes, {len(grid.cells)} cells, {len(gp)} Gauss points; eps = {args.eps:g}")
    print(f"max |phi_i(x_j) - delta_ij|      {audit.max_deviation:.3e}")
    print(f"interpolation bound (max)        {rows[1][1]:.3e}")
    print(f"worst deviation / bound          {ratio:.3f}  ({'within' if ratio <= 10 else 'exceeds'} 10x)")
    print(f"partition of unity residual      {pou:.3e}")
    print(f"linear reproduction residual     {lin:.3e}")
    print(f"gradient check (worst relative)  {gc:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "audit.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, val in rows:
                w.writerow([k, f"{val:.6e}"])
        if not args.no_figures:
            from .report import plot_kronecker

            plot_kronecker(out / "kronecker.png", audit)
        print(f"report: {out / 'audit.csv'}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "verify": cmd_verify, "audit": cmd_audit}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except EFGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
