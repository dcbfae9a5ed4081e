"""Command line: ``consensus-lp {gen,solve,check}``.

Exit codes
----------
0  success (``solve``: converged; ``check``: within tolerance)
1  usage, I/O, parse error, or instance over the oracle cap
2  ``solve`` stopped at max_iters
3  ``solve`` stopped with rows that can never be satisfied (infeasible_flagged)
4  ``solve`` aborted by a subblock QP failure
5  ``check`` found the objective gap above tolerance
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from consensus_lp import oracle
from consensus_lp.engine import PENALTY_MODES, PROX_SCHEDULES, SolverConfig
from consensus_lp.model import (
    ProblemError,
    dump_problem,
    generate_instance_with_witness,
    parse_problem,
    partition,
)
from consensus_lp.runtime import TraceWriter, run

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITERS, EXIT_INFEASIBLE, EXIT_INNER, EXIT_GAP = 0, 1, 2, 3, 4, 5
STATUS_EXIT = {
    "converged": EXIT_OK,
    "max_iters": EXIT_MAX_ITERS,
    "infeasible_flagged": EXIT_INFEASIBLE,
    "inner_failure": EXIT_INNER,
}
THREADS_ENV = "CONSENSUS_LP_THREADS"

# per-block coefficients accept "0.5" or "0.5,1,2"
_PER_BLOCK = {"alpha_W", "alpha_mu", "alpha_nu", "rho", "sigma0", "gamma0"}


def _scalars(text: str):
    parts = [float(v) for v in text.split(",")]
    return parts[0] if len(parts) == 1 else tuple(parts)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = SolverConfig()
    g = p.add_argument_group("solver configuration")
    for f in fields(SolverConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        if f.name in _PER_BLOCK:
            g.add_argument(flag, type=_scalars, default=default,
                           help="scalar or comma-separated per-block values (default: %(default)s)")
        elif f.name == "prox_schedule":
            g.add_argument(flag, choices=PROX_SCHEDULES, default=default, help="(default: %(default)s)")
        elif f.name == "penalty_mode":
            g.add_argument(flag, choices=PENALTY_MODES, default=default, help="(default: %(default)s)")
        else:
            g.add_argument(flag, type=type(default), default=default, help="(default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consensus-lp",
        description="Consensus-block augmented Lagrangian LP solver.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Exit codes" + __doc__.split("Exit codes", 1)[1],
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a random feasible instance")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--p", type=int, default=0, help="inequality rows (default: %(default)s)")
    gen.add_argument("--q", type=int, default=0, help="equality rows (default: %(default)s)")
    gen.add_argument("--seed", type=int, default=0, help="(default: %(default)s)")
    gen.add_argument("--out", required=True)

    solve = sub.add_parser("solve", help="run the solver on a problem file")
    solve.add_argument("--problem", required=True)
    solve.add_argument("--N", type=int, default=1, help="consensus blocks (default: %(default)s)")
    solve.add_argument("--M", type=int, default=1, help="column subblocks (default: %(default)s)")
    solve.add_argument("--out", help="report JSON path")
    solve.add_argument("--trace", help="trace CSV path")
    solve.add_argument("--plot", help="convergence figure path (PNG, PDF, SVG)")
    solve.add_argument("--rate-check", action="store_true",
                       help="scan the trace against the C/k bound (consensus-only, constant schedule)")
    _add_config_flags(solve)

    check = sub.add_parser("check", help="compare a report with the reference LP solver")
    check.add_argument("--problem", required=True)
    check.add_argument("--report", required=True)
    check.add_argument("--gap-tol", type=float, default=1e-4,
                       help="relative objective tolerance, scaled by max(1,|f*|) (default: %(default)s)")
    return parser


def _err(msg: str) -> None:
    print(f"consensus-lp: error: {msg}", file=sys.stderr)


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    value = int(raw)
    if value < 0:
        raise ValueError(f"{THREADS_ENV} must be >= 0")
    return value


def _load_problem(path):
    with open(path, encoding="utf-8") as fh:
        return parse_problem(fh.read())


def cmd_gen(args) -> int:
    try:
        inst = generate_instance_with_witness(args.seed, args.n, args.p, args.q)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_ERROR
    try:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(dump_problem(inst.spec))
    except OSError as exc:
        _err(str(exc))
        return EXIT_ERROR
    print("x0 =", json.dumps(inst.x0.tolist()))
    print("s  =", json.dumps(inst.margin.tolist()))
    return EXIT_OK


def cmd_solve(args) -> int:
    try:
        spec = _load_problem(args.problem)
        plan = partition(spec, args.N, args.M)
        cfg = SolverConfig(**{f.name: getattr(args, f.name) for f in fields(SolverConfig)})
        cfg.validate(plan.N)
        threads = _threads()
    except (OSError, ValueError) as exc:
        _err(str(exc))
        return EXIT_ERROR

    try:
        if args.trace:
            with open(args.trace, "w", encoding="utf-8") as fh:
                report = run(spec, plan, cfg, threads=threads, trace_sink=TraceWriter(fh),
                             rate_check=args.rate_check)
        else:
            report = run(spec, plan, cfg, threads=threads, rate_check=args.rate_check)
        if args.out:
            payload = report.to_dict()
            payload["config"] = cfg.to_dict()
            payload["N"], payload["M"] = plan.N, plan.M
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump(payload, fh)
        if args.plot:
            from consensus_lp.plotting import plot_trace

            plot_trace(report.trace, args.plot, plan.N,
                       title=f"{args.problem}  N={plan.N} M={plan.M}  {report.status}")
    except OSError as exc:
        _err(str(exc))
        return EXIT_ERROR

    r = report.residuals
    print(f"status      {report.status}")
    print(f"iterations  {report.iterations}")
    print(f"f(Z)        {report.f_Z:.12g}")
    print(f"residuals   cons={r[0]:.3e} ineq={r[1]:.3e} eq={r[2]:.3e}")
    print(f"clamps      {report.clamp_total}")
    if report.rate is not None:
        if report.rate.get("applicable"):
            verdict = "holds" if report.rate["holds"] else f"violated at {report.rate['violations']} k"
            print(f"rate bound  C={report.rate['C']:.6g}  {verdict}")
        else:
            print(f"rate bound  not applicable: {report.rate['reason']}")
    return STATUS_EXIT[report.status]


def _report_duals(report: dict, spec, N: int):
    """Aggregate block multipliers into full-length vectors scaled by 1/N."""
    plan = partition(spec, N, 1)
    mu = np.zeros(spec.p)
    nu = np.zeros(spec.q)
    W = np.zeros(spec.n)
    for i, b in enumerate(report["blocks"]):
        mu[plan.ineq_rows[i]] = b["mu"]
        nu[plan.eq_rows[i]] = b["nu"]
        W += np.asarray(b["W"])
    return mu / N, nu / N, W / N


def cmd_check(args) -> int:
    try:
        spec = _load_problem(args.problem)
        with open(args.report, encoding="utf-8") as fh:
            report = json.load(fh)
        Z = np.asarray(report["Z"], dtype=float)
        if Z.shape != (spec.n,):
            raise ProblemError("report Z does not match the problem dimension")
        cert = oracle.solve_reference(spec)
    except oracle.OracleCapError as exc:
        _err(f"over oracle cap: {exc}")
        return EXIT_ERROR
    except (OSError, ValueError, KeyError) as exc:
        _err(str(exc))
        return EXIT_ERROR

    if cert.status != "optimal":
        print("reference   infeasible")
        print(f"report      status={report.get('status')}")
        return EXIT_GAP

    f_Z = spec.objective(Z)
    gap = abs(f_Z - cert.f_star)
    tol = args.gap_tol * max(1.0, abs(cert.f_star))
    N = len(report.get("blocks", [])) or 1
    mu, nu, W = _report_duals(report, spec, N)
    primal = max(
        float(np.maximum(spec.G(Z), 0).max(initial=0.0)),
        float(np.abs(spec.H(Z)).max(initial=0.0)),
    )
    print(f"f*          {cert.f_star:.12g}")
    print(f"f(Z)        {f_Z:.12g}")
    print(f"gap         {gap:.3e}  ({'<=' if gap <= tol else '>'} {tol:.1e})")
    print(f"primal viol {primal:.3e}")
    print(f"KKT(Z)      {oracle.kkt_residual(spec, Z, mu, nu, W):.3e}")
    print(f"KKT(x*)     {cert.kkt_residual:.3e}")
    return EXIT_OK if gap <= tol else EXIT_GAP


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"gen": cmd_gen, "solve": cmd_solve, "check": cmd_check}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
