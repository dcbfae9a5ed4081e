"""Acceptance criteria, one test (and one summary line) each.

Criteria 1-4 run the solver with its default configuration on twenty
generated instances; the runs are shared through session fixtures.
"""

import io
import itertools

import numpy as np
import pytest

from consensus_lp import engine, oracle
from consensus_lp.engine import SolverConfig
from consensus_lp.model import generate_instance, partition
from consensus_lp.runtime import TraceWriter, ring_aggregate, run

from conftest import ACCEPTANCE
from test_engine import block_objective, quad_from_values, randomize, setup
from test_runtime import strip_wall_time


def report_line(num, ok, text):
    ACCEPTANCE[num] = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {text}"
    print(ACCEPTANCE[num])


def instance_table(count=20, seed=2024):
    rng = np.random.default_rng(seed)
    shapes = itertools.cycle(itertools.product((1, 2, 4), (1, 2, 4)))
    out = []
    for t in range(count):
        N, M = next(shapes)
        n = int(rng.integers(4, 21))
        p = int(rng.integers(0, 2 * n + 1))
        q = int(rng.integers(0, n // 2 + 1))
        out.append(dict(seed=seed + t, n=n, p=p, q=q, N=N, M=M))
    return out


INSTANCES = instance_table()


def _solve_all(mode):
    cfg = SolverConfig(penalty_mode=mode)
    results = []
    for row in INSTANCES:
        spec = generate_instance(row["seed"], row["n"], row["p"], row["q"])
        report = run(spec, partition(spec, row["N"], row["M"]), cfg,
                     rate_check=(mode == "consensus-only"))
        cert = oracle.solve_reference(spec)
        results.append((row, spec, report, cert.f_star))
    return results


@pytest.fixture(scope="session")
def full_runs():
    return _solve_all("full")


@pytest.fixture(scope="session")
def consensus_runs():
    return _solve_all("consensus-only")


@pytest.mark.slow
def test_1_optimality(full_runs):
    bad = []
    for row, spec, rep, f_star in full_runs:
        gap = abs(rep.f_Z - f_star)
        if rep.status != "converged" or gap > 1e-4 * max(1.0, abs(f_star)):
            bad.append(f"seed={row['seed']} {rep.status} k={rep.iterations} gap={gap:.2e}")
    ok = not bad
    report_line(1, ok, f"{len(full_runs) - len(bad)}/{len(full_runs)} converged within 1e-4 of f*"
                + ("" if ok else f"; first miss {bad[0]}"))
    assert ok, bad


@pytest.mark.slow
def test_2_constraint_satisfaction(full_runs):
    converged = [r for r in full_runs if r[2].status == "converged"]
    worst = max((max(r[2].residuals) for r in converged), default=None)
    ok = bool(converged) and worst <= 1e-6
    report_line(2, ok, f"{len(converged)} converged instances, worst terminal residual "
                + ("n/a" if worst is None else f"{worst:.2e}"))
    assert ok


@pytest.mark.slow
def test_3_monotone_merit(full_runs):
    worst = -np.inf
    offenders = []
    for row, spec, rep, _ in full_runs:
        rise = float(np.diff(rep.merit_values).max())
        worst = max(worst, rise)
        if rise > 1e-9:
            offenders.append(row["seed"])
    ok = not offenders
    clamps = sum(r[2].clamp_total for r in full_runs)
    report_line(3, ok, f"largest L^(k+1) - L^k over {len(full_runs)} runs = {worst:.2e}, "
                f"{clamps} dual clamps"
                + ("" if ok else f"; rising on seeds {offenders}"))
    assert ok


@pytest.mark.slow
def test_4_rate_bound(consensus_runs):
    converged = [r for r in consensus_runs if r[2].status == "converged"]
    failing = [r[0]["seed"] for r in converged if not r[2].rate["holds"]]
    # an empty set of converged runs would make the bound vacuous
    ok = bool(converged) and not failing
    report_line(4, ok, f"{len(converged)}/{len(consensus_runs)} consensus-only runs converged, "
                f"bound violated on {len(failing)}")
    assert ok


def test_5_closed_forms_vs_oracles():
    rng = np.random.default_rng(55)
    worst = {"x": [0.0, 0.0], "z": [0.0, 0.0], "y": [0.0, 0.0]}

    def note(key, darg, dobj):
        worst[key][0] = max(worst[key][0], darg)
        worst[key][1] = max(worst[key][1], dobj)

    for case in range(1000):
        n = int(rng.integers(1, 9))
        M = max(int(rng.integers(1, n + 1)), -(-n // 4))
        spec = generate_instance(10_000 + case, n, int(rng.integers(0, 6)), int(rng.integers(0, n // 2 + 1)))
        cfg = SolverConfig(penalty_mode=("full", "consensus-only")[case % 2])
        datas, blocks, glob, _ = setup(spec, 1, M, cfg)
        randomize(rng, datas, blocks, glob, scale=2.0)
        d, b = datas[0], blocks[0]
        l = int(rng.integers(0, M))
        a, e = d.col_ranges[l]
        sigma = float(rng.uniform(0.05, 3))
        x = engine.update_x_subblock(d, b, glob.Z, l, sigma, cfg)

        def f(xs):
            full = b.X.copy()
            full[a:e] = xs
            return block_objective(d, b, glob.Z, full, sigma, cfg.penalty)

        Q, q = quad_from_values(f, e - a)
        x_ref, _ = oracle.box_qp_bruteforce(Q, q, d.lower[a:e], d.upper[a:e])
        note("x", np.abs(x - x_ref).max(), abs(f(x) - f(x_ref)) / max(1.0, abs(f(x_ref))))

    for _ in range(1000):
        N = int(rng.integers(1, 6))
        rho, X, W = rng.uniform(0, 2, N), rng.normal(size=N) * 2, rng.normal(size=N)
        tau, Zk = rng.uniform(0.1, 2), rng.normal()
        lo = rng.uniform(-2, 0)
        hi = lo + rng.uniform(0.1, 3)
        num, den, _ = ring_aggregate([np.array([rho[i] * X[i] + W[i] + tau * Zk]) for i in range(N)],
                                     [rho[i] + tau for i in range(N)])
        z = engine.z_closed_form(num, den, np.array([lo]), np.array([hi]))[0]

        def fz(t):
            return sum(0.5 * rho[i] * (X[i] - t) ** 2 + W[i] * (X[i] - t) + 0.5 * tau * (t - Zk) ** 2
                       for i in range(N))

        t = oracle.numeric_minimize(fz, lo, hi)
        note("z", abs(z - t), abs(fz(z) - fz(t)))

    for _ in range(1000):
        g, yk, mu = rng.normal() * 2, rng.uniform(0, 2), rng.normal() * 2
        rho, gamma, u = rng.uniform(0.1, 3), rng.uniform(0.1, 3), rng.uniform(0.01, 3)
        y = engine.update_y(np.array([g]), np.array([yk]), np.array([mu]), rho, gamma, np.array([u]))[0]

        def fy(s):
            return 0.5 * rho * (g + s) ** 2 + mu * s + 0.5 * gamma * (s - yk) ** 2

        t = oracle.numeric_minimize(fy, 0.0, u)
        note("y", abs(y - t), abs(fy(y) - fy(t)))

    ok = all(a <= 1e-6 and o <= 1e-10 for a, o in worst.values())
    report_line(5, ok, "worst (argument, objective) gaps: " + ", ".join(
        f"{k}=({a:.1e}, {o:.1e})" for k, (a, o) in worst.items()))
    assert ok


def test_6_ring_equals_direct_sum():
    rng = np.random.default_rng(66)
    mismatches = 0
    for _ in range(1000):
        N = int(rng.integers(1, 9))
        vals = [rng.normal(size=5) * 10.0 ** rng.integers(-6, 6) for _ in range(N)]
        wts = list(rng.uniform(0, 4, N))
        num, den, _ = ring_aggregate(vals, wts)
        ref, ref_den = vals[0], wts[0]
        for i in range(1, N):
            ref, ref_den = ref + vals[i], ref_den + wts[i]
        mismatches += num.tobytes() != ref.tobytes() or den != ref_den
    ok = mismatches == 0
    report_line(6, ok, f"{mismatches} of 1000 ring sums differ bitwise from direct summation")
    assert ok


def test_7_determinism():
    spec = generate_instance(77, 12, 16, 4)
    N = 4
    plan = partition(spec, N, 2)
    cfg = SolverConfig(max_iters=500)
    texts = {}
    for threads in (1, 2, N):
        buf = io.StringIO()
        run(spec, plan, cfg, threads=threads, trace_sink=TraceWriter(buf))
        texts[threads] = strip_wall_time(buf.getvalue())
    ok = texts[1] == texts[2] == texts[N]
    report_line(7, ok, f"trace CSVs for threads 1, 2, {N} "
                + ("identical" if ok else "differ") + " (wall-clock column excluded)")
    assert ok


def test_8_oracle_self_consistency():
    rng = np.random.default_rng(88)
    worst_gap = worst_kkt = 0.0
    count = 0
    for t in range(40):
        n = int(rng.integers(2, 13))
        spec = generate_instance(8000 + t, n, int(rng.integers(0, min(2 * n, 8) + 1)),
                                 int(rng.integers(0, n // 2 + 1)))
        cert = oracle.solve_reference(spec)
        enum = oracle.enumerate_vertices(spec)
        assert cert.status == enum.status == "optimal"
        worst_gap = max(worst_gap, abs(cert.f_star - enum.f_star))
        worst_kkt = max(worst_kkt, cert.kkt_residual)
        count += 1
    ok = worst_gap <= 1e-9 and worst_kkt <= 1e-7
    report_line(8, ok, f"{count} instances: max |f_simplex - f_enum| = {worst_gap:.1e}, "
                f"max KKT = {worst_kkt:.1e}")
    assert ok
