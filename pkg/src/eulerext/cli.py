"""Command-line driver.

Exit codes: 0 success, 1 verification failure, 2 input or argument error.
An optional ``--config`` file of ``key = value`` lines supplies defaults for
the chosen command; explicit flags override it.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import scipy.fft as sfft

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input files or arguments (exit code 2)."""


def read_config(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _need(path, what):
    if path is None:
        raise UsageError(f"missing --{what}")
    if not Path(path).exists():
        raise UsageError(f"{what} file not found: {path}")
    return path


def _load_metric(source, grid=None):
    from .flowgen import load_metric
    if source in (None, "flat"):
        return None
    m = load_metric(_need(source, "metric"))
    if grid is not None and m.grid.n != grid.n:
        raise UsageError(f"metric grid {m.grid.n} does not match flow grid {grid.n}")
    return m


def _load_flow(args):
    from .flowgen import load_flow
    flow = load_flow(_need(args.flow, "flow"))
    metric = _load_metric(getattr(args, "metric", None), flow.grid)
    if metric is not None:
        flow = load_flow(args.flow, metric)
    return flow


# -- commands -------------------------------------------------------------

def cmd_gen(args) -> int:
    from .flowgen import canonical_shear, check_in_U, make_drift_flow, save_flow
    if args.out is None:
        raise UsageError("missing --out")
    metric = _load_metric(args.metric)
    try:
        if args.kind == "canonical":
            flow = canonical_shear(args.T, args.epsilon, args.grid, args.frames)
        else:
            flow = make_drift_flow(args.T, args.d, metric, args.seed, args.amplitude, args.grid,
                                   args.frames)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    save_flow(args.out, flow)
    print(check_in_U(flow).summary())
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_extend(args) -> int:
    from .extender import build_extension
    from .verifier import verify_boussinesq_form
    flow = _load_flow(args)
    substeps = max(1, int(round(1.0 / args.dt)))
    try:
        res = build_extension(flow, args.K, ridge_scale=args.ridge_scale, tol=args.tol,
                              substeps=substeps)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise UsageError(str(exc)) from exc
    ext = res.extension
    if args.out:
        out = Path(args.out)
        ext.save(out)
        res.forcing.save(out / "forcing.bin")
    rep = verify_boussinesq_form(flow, ext)
    print(f"slots: {ext.m} (including closure)")
    print(rep.summary())
    if args.K == 0:
        print("warning: K = 0 gives the trivial extension; the residual is the full forcing",
              file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .extender import ExtensionData
    from .verifier import verify_extension, write_report_csv
    flow = _load_flow(args)
    ext_path = _need(args.ext, "ext")
    try:
        ext = ExtensionData.load(ext_path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read extension {ext_path}: {exc}") from exc
    try:
        cert = verify_extension(flow, ext, args.tol_momentum, args.tol_transport)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(cert.summary())
    if args.csv:
        write_report_csv(args.csv, cert)
    return EXIT_OK if cert.passed else EXIT_FAIL


def _initial_velocity(args):
    from .fields import PeriodicGrid
    from .geometry import flat_metric
    if args.flow:
        flow = _load_flow(args)
        return flow.velocity[0], flow.metric
    grid = PeriodicGrid((args.grid,) * 2)
    x1, x2 = grid.mesh()
    a = args.amplitude
    if args.init == "taylor-green":
        u0 = a * np.stack([np.sin(2 * np.pi * x1) * np.cos(2 * np.pi * x2),
                           -np.cos(2 * np.pi * x1) * np.sin(2 * np.pi * x2)])
    elif args.init == "shear":
        u0 = np.stack([a * np.sin(2 * np.pi * x2), np.zeros(grid.n)])
    else:
        raise UsageError(f"unknown initial state {args.init}")
    return u0, flat_metric(grid)


def cmd_simulate(args) -> int:
    from .boussinesq import kinetic_energy, separable_forcing, solve
    from .fields import write_binary
    from .forcing import SeparableForcing
    u0, metric = _initial_velocity(args)
    forcing = None
    if args.F not in (None, "none"):
        try:
            sep = SeparableForcing.load(_need(args.F, "F"))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        forcing = separable_forcing(sep, metric.grid)
    try:
        traj = solve(u0, metric, forcing, args.T, args.dt, args.stride)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    except FloatingPointError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    drift = float(np.abs(traj.velocity - traj.velocity[0]).max())
    ke = kinetic_energy(traj)
    print(f"frames: {len(traj.times)}")
    print(f"velocity drift: {drift:.3e}")
    print(f"kinetic energy: start {ke[0]:.12g} end {ke[-1]:.12g}")
    print(f"max divergence: {traj.max_divergence:.3e}")
    if args.out:
        write_binary(args.out, traj.velocity, args.T)
    return EXIT_OK


def cmd_stability(args) -> int:
    from .boussinesq import default_stability_setup, stability_experiment
    u0, metric, F, mode = default_stability_setup(args.grid)
    levels = range(2, 2 + args.levels)
    table = stability_experiment(u0, metric, F, mode, levels, args.T, args.dt)
    print(f"reference residual: {table.reference_residual:.3e}")
    print("N  delta  sup_t E0^(1/2)  sup|u^N-u|")
    for r in table.rows:
        print(f"{r.N}  {r.delta:.6g}  {r.energy_distance:.6e}  {r.seminorms[0]:.6e}"
              + ("  diverged" if r.diverged else ""))
    mono = table.monotone()
    print(f"slope: {table.slope():.4f}")
    print(f"monotone: {'yes' if mono else 'no'}")
    if args.csv:
        table.write_csv(args.csv)
    return EXIT_OK if mono else EXIT_FAIL


def cmd_dof(args) -> int:
    from .dof import find_threshold, write_table_csv
    try:
        N_star, table = find_threshold(args.d, args.m, args.N_max)
    except (ValueError, MemoryError) as exc:
        raise UsageError(str(exc)) from exc
    print("N,dim_VN,dim_WN,M,gap")
    for r in table:
        print(f"{r.N},{r.dim_V},{r.dim_W},{r.M},{r.gap}")
    if N_star is None:
        print(f"threshold: none for N <= {args.N_max}")
    else:
        print(f"threshold: N* = {N_star}")
    if args.csv:
        write_table_csv(args.csv, table)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eulerext", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="file of 'key = value' defaults for the command")
    p.add_argument("--threads", type=int, default=1, help="worker cap for transforms")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a flow in U")
    g.add_argument("--kind", choices=["drift", "canonical"], default="drift")
    g.add_argument("--d", type=int, default=2)
    g.add_argument("--T", type=float, default=1.0)
    g.add_argument("--grid", type=int, default=32)
    g.add_argument("--frames", type=int, default=17)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--amplitude", type=float, default=None)
    g.add_argument("--epsilon", type=float, default=1 / 32)
    g.add_argument("--metric", default="flat")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("extend", help="build extension data for a flow")
    e.add_argument("--flow")
    e.add_argument("--metric", default="flat")
    e.add_argument("--K", type=int, default=8)
    e.add_argument("--dt", type=float, default=1 / 256, help="characteristic integration step")
    e.add_argument("--ridge-scale", type=float, default=1e-9)
    e.add_argument("--tol", type=float, default=1e-8)
    e.add_argument("--out")
    e.set_defaults(func=cmd_extend)

    v = sub.add_parser("verify", help="check a flow against extension data")
    v.add_argument("--flow")
    v.add_argument("--metric", default="flat")
    v.add_argument("--ext")
    v.add_argument("--tol-momentum", type=float, default=1e-3)
    v.add_argument("--tol-transport", type=float, default=1e-5)
    v.add_argument("--csv")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("simulate", help="run the forced solver")
    s.add_argument("--flow", help="take the initial velocity from frame 0 of a flow file")
    s.add_argument("--metric", default="flat")
    s.add_argument("--init", choices=["taylor-green", "shear"], default="taylor-green")
    s.add_argument("--amplitude", type=float, default=0.1)
    s.add_argument("--grid", type=int, default=32)
    s.add_argument("--F", default="none", help="'none' or a separable forcing file")
    s.add_argument("--T", type=float, default=1.0)
    s.add_argument("--dt", type=float, default=1 / 256)
    s.add_argument("--stride", type=int, default=16)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("stability", help="perturbed-forcing convergence table")
    t.add_argument("--levels", type=int, default=5)
    t.add_argument("--grid", type=int, default=32)
    t.add_argument("--T", type=float, default=1.0)
    t.add_argument("--dt", type=float, default=1 / 128)
    t.add_argument("--csv")
    t.set_defaults(func=cmd_stability)

    d = sub.add_parser("dof", help="exact jet dimension counts")
    d.add_argument("--d", type=int, default=3)
    d.add_argument("--m", type=int, default=1)
    d.add_argument("--N-max", dest="N_max", type=int, default=20)
    d.add_argument("--csv")
    d.set_defaults(func=cmd_dof)
    return p


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if not args.config:
        return args
    conf = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for k, v in conf.items():
        if k not in known:
            raise UsageError(f"config key '{k}' is not an option of '{args.command}'")
        act = known[k]
        defaults[k] = act.type(v) if act.type else v
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with sfft.set_workers(max(1, args.threads)):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
