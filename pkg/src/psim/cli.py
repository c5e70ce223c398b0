"""Command line driver: TOML configs in, CSV tables and SVG charts out.

Subcommands: ``run`` (transient simulation with step diagnostics),
``convergence`` (refinement study against a fine reference mesh),
``equilibrium`` (thermodynamic equilibrium profiles), and ``steady``
(stationary solve from the configured initial data).  Exit codes: 0 on
success, 1 on configuration errors, 2 on solver failures.
"""

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from . import diagnostics, system
from .config import load_config
from .errors import ConfigError, MassOutOfRange, NoConvergence, StepFailure
from .mesh import build_three_layer_mesh, project_to_coarser
from .system import State

FORMAT_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2

PROFILE_COLUMNS = ("x", "region", "psi", "phi_n", "phi_p", "phi_a", "n_n", "n_p", "n_a")

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd",
            "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(value):
    return "%.17g" % float(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def _profile_rows(scenario, state):
    mesh = scenario.mesh
    sp_n, sp_p = scenario.carriers()
    sp_a = scenario.species("a")
    n_n = sp_n.density(state.phi_n, state.psi)
    n_p = sp_p.density(state.phi_p, state.psi)
    n_a = sp_a.density(state.phi_a, state.psi[sp_a.cells])
    rows = []
    for k in range(mesh.n_cells):
        ia = mesh.intr_index_of_cell[k]
        rows.append([
            _fmt(mesh.cell_center[k]),
            str(int(mesh.cell_region[k])),
            _fmt(state.psi[k]),
            _fmt(state.phi_n[k]),
            _fmt(state.phi_p[k]),
            _fmt(state.phi_a[ia]) if ia >= 0 else "",
            _fmt(n_n[k]),
            _fmt(n_p[k]),
            _fmt(n_a[ia]) if ia >= 0 else "",
        ])
    return rows


def _write_profiles(path, scenario, state):
    _write_csv(path, PROFILE_COLUMNS, _profile_rows(scenario, state))


def _read_profile_state(path, scenario, time):
    """Rebuild a State from a profiles CSV written by this driver."""
    mesh = scenario.mesh
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None or not set(
                ("x", "psi", "phi_n", "phi_p", "phi_a")
            ).issubset(reader.fieldnames):
                raise ConfigError(f"{path} is not a profiles CSV")
            rows = list(reader)
    except OSError as exc:
        raise ConfigError(f"cannot read initial state {path}: {exc}") from exc
    if len(rows) != mesh.n_cells:
        raise ConfigError(
            f"{path} holds {len(rows)} rows but the mesh has {mesh.n_cells} cells"
        )
    psi = np.array([float(r["psi"]) for r in rows])
    phi_n = np.array([float(r["phi_n"]) for r in rows])
    phi_p = np.array([float(r["phi_p"]) for r in rows])
    phi_a_cells = [r["phi_a"] for r in rows]
    filled = [i for i, v in enumerate(phi_a_cells) if v != ""]
    if filled != list(mesh.intr_cells):
        raise ConfigError(f"{path}: phi_a entries do not match the intrinsic layer")
    x = np.array([float(r["x"]) for r in rows])
    if np.max(np.abs(x - mesh.cell_center)) > 1e-9 * (1.0 + np.max(np.abs(x))):
        raise ConfigError(f"{path}: cell centers do not match the configured mesh")
    phi_a = np.array([float(phi_a_cells[i]) for i in filled])
    return State(psi=psi, phi_n=phi_n, phi_p=phi_p, phi_a=phi_a, time=time)


def _initial_state(setup, t_start):
    if setup.initial_kind == "from_file":
        return _read_profile_state(setup.initial_path, setup.scenario, t_start)
    return system.prepare_initial_state(
        setup.scenario, setup.initial_kind, setup.initial_amplitude, t_start
    )


def _xml_escape(text):
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _axis_ticks(lo, hi, count=6):
    span = hi - lo
    if span <= 0:
        return [lo]
    raw = span / max(count - 1, 1)
    magnitude = 10.0 ** math.floor(math.log10(raw))
    for factor in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = factor * magnitude
        if span / step <= count - 1:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    value = first
    while value <= hi + 1e-9 * span:
        ticks.append(value)
        value += step
    return ticks or [lo]


def _chart(path, title, x_label, series, xlog=False):
    """Polyline chart with a log10 y axis; nonpositive values are dropped."""
    width, height = 880, 520
    ml, mr, mt, mb = 80, 220, 45, 55
    pw, ph = width - ml - mr, height - mt - mb

    cleaned = []
    for label, xs, ys in series:
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        keep = np.isfinite(xs) & np.isfinite(ys) & (ys > 0)
        if xlog:
            keep &= xs > 0
        if np.any(keep):
            cleaned.append((label, xs[keep], ys[keep]))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="13">',
        f"<title>{_xml_escape(title)}</title>",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml + pw / 2:.1f}" y="24" text-anchor="middle" '
        f'font-size="16">{_xml_escape(title)}</text>',
    ]
    if not cleaned:
        parts.append(
            f'<text x="{width / 2}" y="{height / 2}" text-anchor="middle" '
            f'fill="#777">no positive data to plot</text>'
        )
        parts.append("</svg>")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write("\n".join(parts) + "\n")
        return

    tx = (lambda v: math.log10(v)) if xlog else (lambda v: v)
    x_lo = min(tx(float(np.min(xs))) for _, xs, _ in cleaned)
    x_hi = max(tx(float(np.max(xs))) for _, xs, _ in cleaned)
    if x_hi <= x_lo:
        x_lo, x_hi = x_lo - 0.5, x_lo + 0.5
    y_lo = math.floor(min(math.log10(float(np.min(ys))) for _, _, ys in cleaned))
    y_hi = math.ceil(max(math.log10(float(np.max(ys))) for _, _, ys in cleaned))
    if y_hi <= y_lo:
        y_hi = y_lo + 1

    def px(value):
        return ml + (tx(value) - x_lo) / (x_hi - x_lo) * pw

    def py(value):
        return mt + (y_hi - math.log10(value)) / (y_hi - y_lo) * ph

    for decade in range(int(y_lo), int(y_hi) + 1):
        y = mt + (y_hi - decade) / (y_hi - y_lo) * ph
        parts.append(
            f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" y2="{y:.1f}" '
            f'stroke="#ddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{ml - 8}" y="{y + 4:.1f}" text-anchor="end">1e{decade}</text>'
        )
    if xlog:
        x_ticks = list(range(math.ceil(x_lo), math.floor(x_hi) + 1)) or [x_lo]
        x_tick_pairs = [(10.0 ** t, f"1e{int(t)}") for t in x_ticks]
    else:
        x_tick_pairs = [(v, "%g" % v) for v in _axis_ticks(x_lo, x_hi)]
    for value, label in x_tick_pairs:
        x = px(value)
        parts.append(
            f'<line x1="{x:.1f}" y1="{mt + ph}" x2="{x:.1f}" y2="{mt + ph + 5}" '
            f'stroke="#333" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{mt + ph + 20}" text-anchor="middle">{label}</text>'
        )
    parts.append(
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
        f'stroke="#333" stroke-width="1"/>'
    )
    parts.append(
        f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" '
        f'text-anchor="middle">{_xml_escape(x_label)}</text>'
    )

    for index, (label, xs, ys) in enumerate(cleaned):
        color = _PALETTE[index % len(_PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" '
            f'stroke-width="1.5"/>'
        )
        ly = mt + 16 + 20 * index
        parts.append(
            f'<line x1="{ml + pw + 14}" y1="{ly - 4}" x2="{ml + pw + 40}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{ml + pw + 46}" y="{ly}">{_xml_escape(label)}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(parts) + "\n")


def _write_manifest(out_dir, command, setup, files, extras=None):
    data = {
        "format_version": FORMAT_VERSION,
        "artifact": {"name": "psim", "version": __version__},
        "command": command,
        "config": {
            "label": setup.label,
            "sha256": hashlib.sha256(setup.config_text.encode("utf-8")).hexdigest(),
        },
        "outputs": sorted(files),
    }
    if extras:
        data.update(extras)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def _say(quiet, message):
    if not quiet:
        print(message)


def _prepare_out_dir(setup):
    out_dir = setup.outputs.directory
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _diag_columns(with_steady, with_dimensional):
    columns = ["time", "entropy", "dissipation", "anion_mass"]
    if with_steady:
        columns.append("entropy_vs_steady")
        columns.extend("l2_sq_" + name for name in diagnostics.L2_FIELDS)
        if with_dimensional:
            columns.append("free_energy")
    return columns


def _diag_row(record, with_steady, with_dimensional):
    row = [_fmt(record.time), _fmt(record.entropy_E_T),
           _fmt(record.dissipation_D_T), _fmt(record.anion_mass)]
    if with_steady:
        row.append(_fmt(record.entropy_vs_steady_E_inf))
        row.extend(_fmt(record.l2_errors[name]) for name in diagnostics.L2_FIELDS)
        if with_dimensional:
            row.append(_fmt(record.free_energy_dimensional))
    return row


def _time_tag(value):
    return ("%.6g" % value).replace("-", "m").replace("+", "")


def cmd_run(args):
    setup = load_config(args.config, out_dir=args.out_dir)
    if setup.grid is None:
        raise ConfigError("the run command needs a [time] table")
    out_dir = _prepare_out_dir(setup)
    scenario = setup.scenario
    taus = setup.grid.steps()
    init = _initial_state(setup, setup.grid.t_start)

    steady = None
    if setup.outputs.steady:
        _say(args.quiet, "solving the steady state")
        steady = system.solve_steady_state(scenario, init, setup.solver)

    with_dimensional = scenario.dimensional is not None
    columns = _diag_columns(steady is not None, with_dimensional)
    rows = []
    total = len(taus)
    stride = max(1, total // 10)

    def sink(record):
        rows.append(_diag_row(record, steady is not None, with_dimensional))
        done = len(rows) - 1
        if done % stride == 0 or done == total:
            _say(args.quiet, f"t = {record.time:g} ({done}/{total} steps)")

    keep_states = bool(setup.outputs.profiles_at)
    _say(args.quiet, f"running {total} implicit steps")
    result = system.run_transient(
        scenario, setup.grid, init, steady=steady, opts=setup.solver,
        sink=sink, keep_states=keep_states,
    )

    files = []
    diag_path = os.path.join(out_dir, "diagnostics.csv")
    _write_csv(diag_path, columns, rows)
    files.append("diagnostics.csv")

    if steady is not None:
        steady_path = os.path.join(out_dir, "steady.csv")
        _write_profiles(steady_path, scenario, steady)
        files.append("steady.csv")

    record_times = np.array([r.time for r in result.records])
    for wanted in setup.outputs.profiles_at:
        gap = np.abs(record_times - wanted)
        best = int(np.argmin(gap))
        if gap[best] > 1e-9 * max(1.0, abs(wanted)):
            print(
                f"warning: no record at t = {wanted:g}; nearest is "
                f"{record_times[best]:g}, skipping that profile",
                file=sys.stderr,
            )
            continue
        name = f"profiles_{_time_tag(record_times[best])}.csv"
        _write_profiles(os.path.join(out_dir, name), scenario, result.states[best])
        files.append(name)

    if setup.outputs.plots:
        times = [r.time for r in result.records]
        series = [
            ("entropy", times, [r.entropy_E_T for r in result.records]),
            ("dissipation", times, [r.dissipation_D_T for r in result.records]),
        ]
        if steady is not None:
            series.append(
                ("vs steady", times,
                 [r.entropy_vs_steady_E_inf for r in result.records])
            )
        _chart(os.path.join(out_dir, "entropy.svg"),
               f"{setup.label}: entropy and dissipation", "time", series)
        files.append("entropy.svg")
        if steady is not None:
            l2_series = [
                (name, times, [r.l2_errors[name] for r in result.records])
                for name in diagnostics.L2_FIELDS
            ]
            _chart(os.path.join(out_dir, "l2.svg"),
                   f"{setup.label}: squared L2 distance to steady state",
                   "time", l2_series)
            files.append("l2.svg")

    _write_manifest(out_dir, "run", setup, files)
    _say(args.quiet, f"wrote {len(files) + 1} files to {out_dir}")
    return EXIT_OK


def cmd_steady(args):
    setup = load_config(args.config, out_dir=args.out_dir)
    out_dir = _prepare_out_dir(setup)
    scenario = setup.scenario
    t_start = setup.grid.t_start if setup.grid is not None else 0.0
    init = _initial_state(setup, t_start)
    _say(args.quiet, "solving the steady state")
    steady = system.solve_steady_state(scenario, init, setup.solver)
    _write_profiles(os.path.join(out_dir, "steady.csv"), scenario, steady)
    dissipation = diagnostics.discrete_dissipation(steady, scenario)
    mass = diagnostics.anion_mass(steady, scenario)
    _write_manifest(out_dir, "steady", setup, ["steady.csv"], {
        "steady": {"dissipation": dissipation, "anion_mass": mass},
    })
    _say(args.quiet,
         f"steady state: dissipation {dissipation:.6e}, anion mass {mass:.12g}")
    return EXIT_OK


def cmd_equilibrium(args):
    setup = load_config(args.config, out_dir=args.out_dir)
    out_dir = _prepare_out_dir(setup)
    scenario = setup.scenario
    _say(args.quiet, "solving the thermodynamic equilibrium")
    state = system.solve_equilibrium(scenario)
    dissipation = diagnostics.discrete_dissipation(state, scenario)
    mass = diagnostics.anion_mass(state, scenario)
    entropy = diagnostics.discrete_entropy(state, scenario)
    _write_profiles(os.path.join(out_dir, "equilibrium.csv"), scenario, state)
    _write_csv(
        os.path.join(out_dir, "equilibrium_summary.csv"),
        ("anion_mass", "dissipation", "entropy", "phi_a_level"),
        [[_fmt(mass), _fmt(dissipation), _fmt(entropy), _fmt(state.phi_a[0])]],
    )
    files = ["equilibrium.csv", "equilibrium_summary.csv"]
    _write_manifest(out_dir, "equilibrium", setup, files, {
        "equilibrium": {
            "anion_mass": mass,
            "dissipation": dissipation,
            "entropy": entropy,
        },
    })
    _say(args.quiet,
         f"equilibrium: anion mass {mass:.12g}, dissipation {dissipation:.6e}")
    if not dissipation <= 1e-12:
        print(
            f"equilibrium dissipation {dissipation:.3e} exceeds 1e-12",
            file=sys.stderr,
        )
        return EXIT_SOLVER
    return EXIT_OK


def _region_spacing(breakpoints, nodes_per_region):
    widths = np.diff(np.asarray(breakpoints, dtype=float))
    return float(np.max(widths) / (nodes_per_region - 1))


def _convergence_worker(config_path, nstar):
    """One refinement: run the transient to its final state."""
    setup = load_config(config_path, nodes_per_region=2 ** nstar + 1)
    if setup.grid is None:
        raise ConfigError("the convergence command needs a [time] table")
    init = _initial_state(setup, setup.grid.t_start)
    result = system.run_transient(
        setup.scenario, setup.grid, init, opts=setup.solver
    )
    final = result.final_state
    return {
        "psi": final.psi, "phi_n": final.phi_n,
        "phi_p": final.phi_p, "phi_a": final.phi_a,
    }


def cmd_convergence(args):
    if not (2 <= args.min <= args.max < args.ref):
        raise ConfigError(
            "refinement levels must satisfy 2 <= min <= max < ref, got "
            f"min={args.min} max={args.max} ref={args.ref}"
        )
    setup = load_config(args.config, out_dir=args.out_dir)
    out_dir = _prepare_out_dir(setup)
    breakpoints = setup.scenario.mesh.breakpoints
    levels = list(range(args.min, args.max + 1))
    workers = args.threads or min(len(levels) + 1, os.cpu_count() or 1)

    _say(args.quiet,
         f"running levels {args.min}..{args.max} against reference {args.ref} "
         f"on {workers} workers")
    finals, failures = {}, {}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = {
            nstar: pool.submit(_convergence_worker, args.config, nstar)
            for nstar in levels + [args.ref]
        }
        for nstar, future in futures.items():
            try:
                finals[nstar] = future.result()
            except (NoConvergence, StepFailure) as exc:
                failures[nstar] = str(exc) or type(exc).__name__
                _say(args.quiet, f"level {nstar} failed: {failures[nstar]}")

    if args.ref in failures:
        print(f"reference level {args.ref} failed: {failures[args.ref]}",
              file=sys.stderr)
        return EXIT_SOLVER

    fine_mesh = build_three_layer_mesh(breakpoints, 2 ** args.ref + 1)
    reference = finals[args.ref]
    errors = {}
    for nstar in levels:
        if nstar in failures:
            continue
        coarse_mesh = build_three_layer_mesh(breakpoints, 2 ** nstar + 1)
        coarse_scenario = load_config(
            args.config, nodes_per_region=2 ** nstar + 1
        ).scenario
        state = State(
            psi=finals[nstar]["psi"], phi_n=finals[nstar]["phi_n"],
            phi_p=finals[nstar]["phi_p"], phi_a=finals[nstar]["phi_a"],
        )
        projected = State(
            psi=project_to_coarser(fine_mesh, coarse_mesh, reference["psi"]),
            phi_n=project_to_coarser(fine_mesh, coarse_mesh, reference["phi_n"]),
            phi_p=project_to_coarser(fine_mesh, coarse_mesh, reference["phi_p"]),
            phi_a=project_to_coarser(fine_mesh, coarse_mesh, reference["phi_a"]),
        )
        errors[nstar] = {
            name: math.sqrt(
                diagnostics.l2_error_sq(state, projected, coarse_scenario, name)
            )
            for name in diagnostics.L2_FIELDS
        }

    header = ["nstar", "h"]
    header.extend("error_" + name for name in diagnostics.L2_FIELDS)
    header.extend("eoc_" + name for name in diagnostics.L2_FIELDS)
    rows = []
    spacing = {n: _region_spacing(breakpoints, 2 ** n + 1) for n in levels}
    for position, nstar in enumerate(levels):
        row = [str(nstar), _fmt(spacing[nstar])]
        if nstar in failures:
            row.extend(["failed"] * len(diagnostics.L2_FIELDS))
            row.extend([""] * len(diagnostics.L2_FIELDS))
            rows.append(row)
            continue
        row.extend(_fmt(errors[nstar][name]) for name in diagnostics.L2_FIELDS)
        partner = levels[position + 1] if position + 1 < len(levels) else None
        if partner is not None and partner not in failures:
            ratio = math.log(spacing[nstar] / spacing[partner])
            for name in diagnostics.L2_FIELDS:
                e_here, e_next = errors[nstar][name], errors[partner][name]
                if e_here > 0 and e_next > 0:
                    row.append(_fmt(math.log(e_here / e_next) / ratio))
                else:
                    row.append("")
        else:
            row.extend([""] * len(diagnostics.L2_FIELDS))
        rows.append(row)

    _write_csv(os.path.join(out_dir, "convergence.csv"), header, rows)
    files = ["convergence.csv"]
    if setup.outputs.plots:
        series = []
        for name in diagnostics.L2_FIELDS:
            hs = [spacing[n] for n in levels if n not in failures]
            es = [errors[n][name] for n in levels if n not in failures]
            series.append((name, hs, es))
        _chart(os.path.join(out_dir, "convergence.svg"),
               f"{setup.label}: final-time error vs mesh size", "h",
               series, xlog=True)
        files.append("convergence.svg")
    extras = {"convergence": {
        "levels": levels, "reference": args.ref,
        "failed": sorted(failures),
    }}
    _write_manifest(out_dir, "convergence", setup, files, extras)
    _say(args.quiet, f"wrote {len(files) + 1} files to {out_dir}")
    return EXIT_SOLVER if failures else EXIT_OK


def _add_common_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument(
        "--out-dir", default=default, metavar="DIR",
        help="override the [outputs] directory",
    )
    parser.add_argument(
        "--quiet", action="store_true",
        default=argparse.SUPPRESS if suppress else False,
        help="suppress progress output",
    )
    parser.add_argument(
        "--threads", type=int, default=default, metavar="N",
        help="worker processes for the convergence study",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="psim",
        description="Finite volume charge transport simulations from TOML configs.",
    )
    _add_common_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    specs = (
        ("run", "transient simulation with per-step diagnostics", cmd_run),
        ("convergence", "mesh refinement study against a fine reference", cmd_convergence),
        ("equilibrium", "thermodynamic equilibrium profiles", cmd_equilibrium),
        ("steady", "stationary solve from the configured initial data", cmd_steady),
    )
    for name, help_text, handler in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="TOML scenario file")
        _add_common_flags(p, suppress=True)
        if name == "convergence":
            p.add_argument("--min", type=int, default=2, metavar="N",
                           help="coarsest refinement level (nodes = 2^N + 1)")
            p.add_argument("--max", type=int, default=8, metavar="N",
                           help="finest studied refinement level")
            p.add_argument("--ref", type=int, default=9, metavar="N",
                           help="reference refinement level")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, MassOutOfRange) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoConvergence, StepFailure) as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
