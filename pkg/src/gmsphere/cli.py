"""Command line interface: ``gmsphere {mesh,run,cases,converge}``.

Results go to stdout as CSV; files (CSV series, VTK, PNG figures) go under
the output directory, which ``GMSPHERE_OUTPUT_DIR`` may override.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

from .fem import build_operators, mesh_quality_report
from .io import read_rows, write_rows, write_vtk
from .mesh import MAX_LEVEL, MeshError, build_cubed_sphere, mean_edge_length, surface_area
from .sim import (
    ConfigError,
    SimulationAborted,
    convergence_study,
    load_config,
    preset_configs,
    run_case,
)
from .stepping import REACTION_MODES

ENV_OUTPUT = "GMSPHERE_OUTPUT_DIR"
EXIT_ABORTED = 2
EXIT_USAGE = 3


def _output_dir(arg, default):
    if arg:
        return arg
    return os.environ.get(ENV_OUTPUT) or default


def _print_rows(rows, out=None):
    if not rows:
        return
    out = out or sys.stdout
    writer = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})


def cmd_mesh(args) -> int:
    rows = []
    for level in range(args.level, (args.to_level or args.level) + 1):
        mesh = build_cubed_sphere(level)
        area = surface_area(mesh)
        q = mesh_quality_report(build_operators(mesh).L)
        rows.append({
            "level": level, "V": mesh.n_vertices, "E": mesh.n_edges, "F": mesh.n_triangles,
            "euler": mesh.euler_characteristic(), "area": area, "area_rel_error": (area - 4 * math.pi) / (4 * math.pi),
            "mean_edge": mean_edge_length(mesh), "positive_offdiag": q.count,
        })
        if args.vtk:
            path = Path(_output_dir(args.output_dir, "output")) / f"mesh_level{level}.vtk"
            write_vtk(path, mesh, title=f"cubed sphere level {level}")
    _print_rows(rows)
    return 0


def _case_figures(result, outdir: Path):
    from .plotting import plot_series, plot_sphere_field

    series = outdir / "series.csv"
    if series.exists():
        rows = read_rows(series)
        if len(rows) > 1:
            plot_series(rows, outdir / "series.png", result.name)
    if result.state is not None:
        plot_sphere_field(result.mesh, result.state.u, outdir / "u_final.png",
                          f"{result.name}: u at t={result.t:g}", spikes=result.spike_nodes)


def cmd_run(args) -> int:
    config = load_config(args.config)
    config = config.replace(output_dir=_output_dir(args.output_dir, config.output_dir))
    try:
        result = run_case(config)
        code = 0
    except SimulationAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        result = exc.result
        code = EXIT_ABORTED
    if not args.no_plots:
        _case_figures(result, Path(config.output_dir) / config.name)
    _print_rows([result.summary_row()])
    return code


def cmd_cases(args) -> int:
    outdir = Path(_output_dir(args.output_dir, "output"))
    orders = (1, 2) if args.order == "both" else (int(args.order),)
    overrides = {"output_dir": str(outdir)}
    if args.T_end is not None:
        overrides["T_end"] = args.T_end
    rows = []
    code = 0
    ops = {}
    for order in orders:
        for config in preset_configs(order, full_scale=args.full_scale, **overrides):
            if config.level not in ops:
                ops[config.level] = build_operators(build_cubed_sphere(config.level))
            try:
                result = run_case(config, ops[config.level])
            except SimulationAborted as exc:
                print(f"error: {exc}", file=sys.stderr)
                result = exc.result
                code = EXIT_ABORTED
            if not args.no_plots:
                _case_figures(result, outdir / config.name)
            row = {"initial_condition": config.ic, "K": config.K, "order": order}
            row.update(result.summary_row())
            rows.append(row)
            print(f"# {config.name}: {row['status']}", file=sys.stderr, flush=True)
    write_rows(outdir / "cases_summary.csv", rows)
    _print_rows(rows)
    return code


def cmd_converge(args) -> int:
    from .plotting import plot_convergence

    options = {k: getattr(args, k) for k in ("limiter", "reaction") if getattr(args, k)}
    if options and args.kind == "spatial_laplacian":
        raise ConfigError("--limiter and --reaction apply to temporal studies only")
    report = convergence_study(args.kind, **options)
    outdir = Path(_output_dir(args.output_dir, "output"))
    write_rows(outdir / f"converge_{args.kind}.csv", report.rows())
    xlabel = "mean edge length" if args.kind == "spatial_laplacian" else "dt"
    if not args.no_plots:
        plot_convergence(report.h, report.errors, report.order, outdir / f"converge_{args.kind}.png", xlabel, args.kind)
    _print_rows(report.rows())
    print(f"# observed order: {report.order:.4f}; pairwise: {', '.join(f'{p:.4f}' for p in report.pairwise)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmsphere", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build cubed-sphere meshes and report their geometry")
    p.add_argument("--level", type=int, default=3)
    p.add_argument("--to-level", type=int, help="report every level up to this one")
    p.add_argument("--vtk", action="store_true", help=f"also write VTK files (levels <= {MAX_LEVEL})")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("run", help="simulate one configuration file")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("cases", help="run the eight pattern presets")
    p.add_argument("--order", choices=("1", "2", "both"), default="1")
    p.add_argument("--full-scale", action="store_true", help="level 5, dt = 1e-5, T = 500")
    p.add_argument("--T-end", type=float, help="override the end time")
    p.add_argument("--output-dir")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_cases)

    p = sub.add_parser("converge", help="observed convergence orders")
    p.add_argument("kind", choices=("temporal_order1", "temporal_order2", "spatial_laplacian"))
    p.add_argument("--limiter", choices=("limit", "zero", "one"), help="limiter mode of the second-order scheme")
    p.add_argument("--reaction", choices=REACTION_MODES, help="second-order reaction coefficients")
    p.add_argument("--output-dir")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_converge)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, MeshError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
