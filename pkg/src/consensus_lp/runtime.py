"""Iteration driver: consensus-block workers, ring aggregation of Z, traces.

Single-threaded execution (``threads=1``) runs every phase inline and is the
reference semantics.  With more threads, long-lived workers each own a fixed
set of blocks and talk only through per-block inboxes; the arithmetic and its
association order are the same, so results are bit-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from consensus_lp import engine
from consensus_lp.engine import (
    BlockData,
    BlockState,
    GlobalState,
    InnerSolverError,
    SolverConfig,
)
from consensus_lp.model import PartitionPlan, ProblemSpec, slack_upper_bounds

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("k", "L_k", "r_cons", "r_ineq", "r_eq", "f_Z", "clamp_count", "wall_time_us")
STATUSES = ("converged", "max_iters", "inner_failure", "infeasible_flagged")


class ProtocolError(RuntimeError):
    """A ring message was lost, duplicated or arrived out of order."""


@dataclass
class IterationTrace:
    k: int
    L_k: float
    r_cons: float
    r_ineq: float
    r_eq: float
    f_Z: float
    clamp_count: int
    wall_time: float  # seconds

    @property
    def residual(self) -> float:
        return max(self.r_cons, self.r_ineq, self.r_eq)


@dataclass
class SolveReport:
    status: str
    Z: np.ndarray
    blocks: list[BlockState]
    trace: list[IterationTrace]
    iterations: int
    f_Z: float
    clamp_total: int = 0
    messages: dict = field(default_factory=dict)
    flagged_rows: list[list[int]] = field(default_factory=list)
    rate: dict | None = None
    message: str = ""

    @property
    def residuals(self) -> tuple[float, float, float]:
        t = self.trace[-1]
        return t.r_cons, t.r_ineq, t.r_eq

    @property
    def merit_values(self) -> np.ndarray:
        return np.array([t.L_k for t in self.trace])

    def to_dict(self, include_trace: bool = True) -> dict:
        out = {
            "status": self.status,
            "iterations": self.iterations,
            "f_Z": self.f_Z,
            "Z": self.Z.tolist(),
            "residuals": dict(zip(("r_cons", "r_ineq", "r_eq"), self.residuals)),
            "L_final": self.trace[-1].L_k,
            "clamp_total": self.clamp_total,
            "messages": self.messages,
            "flagged_rows": self.flagged_rows,
            "blocks": [
                {"X": b.X.tolist(), "Y": b.Y.tolist(), "W": b.W.tolist(),
                 "mu": b.mu.tolist(), "nu": b.nu.tolist()}
                for b in self.blocks
            ],
            "rate": self.rate,
            "message": self.message,
        }
        if include_trace:
            out["trace"] = {c: [] for c in TRACE_COLUMNS}
            for row in self.trace:
                for c, v in zip(TRACE_COLUMNS, _trace_row(row)):
                    out["trace"][c].append(v)
        return out

    def to_json(self, include_trace: bool = True) -> str:
        return json.dumps(self.to_dict(include_trace))


def _trace_row(t: IterationTrace) -> tuple:
    return (t.k, t.L_k, t.r_cons, t.r_ineq, t.r_eq, t.f_Z, t.clamp_count, int(round(t.wall_time * 1e6)))


class TraceWriter:
    """Append-only CSV sink for :class:`IterationTrace` records."""

    def __init__(self, stream: IO[str]):
        self._writer = csv.writer(stream, lineterminator="\n")
        self._stream = stream
        self._header_done = False

    def write(self, t: IterationTrace) -> None:
        if not self._header_done:
            self._writer.writerow(TRACE_COLUMNS)
            self._header_done = True
        row = _trace_row(t)
        self._writer.writerow(
            [row[0]] + [format(v, ".17g") for v in row[1:6]] + [row[6], row[7]]
        )


def record_trace(sink: TraceWriter, t: IterationTrace) -> None:
    sink.write(t)


def read_trace(stream: IO[str]) -> list[IterationTrace]:
    out = []
    for row in csv.DictReader(stream):
        out.append(
            IterationTrace(
                k=int(row["k"]), L_k=float(row["L_k"]), r_cons=float(row["r_cons"]),
                r_ineq=float(row["r_ineq"]), r_eq=float(row["r_eq"]), f_Z=float(row["f_Z"]),
                clamp_count=int(row["clamp_count"]), wall_time=int(row["wall_time_us"]) * 1e-6,
            )
        )
    return out


def ring_aggregate(values: Sequence[np.ndarray], weights: Sequence[float]) -> tuple[np.ndarray, float, int]:
    """Partial sums passed block 1 -> N, then broadcast from block N.

    Returns ``(numerator, denominator, messages)``.  The association order is
    fixed to block-index order, which makes the result reproducible.
    """
    if len(values) != len(weights) or not values:
        raise ValueError("need one (value, weight) pair per block")
    num, den = values[0], weights[0]
    messages = 0
    for v, w in zip(values[1:], weights[1:]):
        messages += 1  # partial (num, den) forwarded to the next block
        num = num + v
        den = den + w
    messages += len(values) - 1  # broadcast of the result
    return num, den, messages


# --------------------------------------------------------------------------
# per-block phase bodies shared by both execution modes


def _phase_x(data, block, Z, k, cfg):
    sigma_k, gamma_k = engine.block_prox(block, k, cfg)
    engine.update_x_block(data, block, Z, sigma_k, cfg)
    return gamma_k


def _phase_y(data, block, gamma_k, cfg):
    G_val = data.G(block.X)
    block.Y_prev = block.Y
    block.Y = engine.update_y(G_val, block.Y, block.mu, block.rho * cfg.penalty, gamma_k, data.u_Y)
    return G_val


def _phase_duals(data, block, Z_new, G_val, k, cfg):
    """Dual step, then this block's share of the merit/residual reduction."""
    i = data.index
    H_val = data.H(block.X)
    block.W, block.mu, block.nu, clamped = engine.update_duals(
        block.W, block.mu, block.nu,
        block.X - Z_new, G_val + block.Y, H_val,
        (cfg.value("alpha_W", i), cfg.value("alpha_mu", i), cfg.value("alpha_nu", i)),
        cfg.dual_bound, cfg.direction(k),
    )
    return (engine.block_merit(data, block, Z_new, cfg.penalty, G_val, H_val),
            engine.block_residuals(data, block, Z_new, G_val, H_val), clamped)


def _combine(acc, new):
    L, r, c = acc
    L2, r2, c2 = new
    return L + L2, tuple(max(a, b) for a, b in zip(r, r2)), c + c2


class _SerialExecutor:
    """Reference execution: every phase inline, blocks in index order."""

    def __init__(self, datas, blocks, glob, cfg, events=None):
        self.datas, self.blocks, self.glob, self.cfg = datas, blocks, glob, cfg
        self.events = events
        self.messages = {"z_aggregation": 0, "reduce": 0}

    def _log(self, k, i, phase):
        if self.events is not None:
            self.events.append((k, i, phase))

    def iterate(self, k):
        datas, blocks, glob, cfg = self.datas, self.blocks, self.glob, self.cfg
        gammas = []
        for d, b in zip(datas, blocks):
            self._log(k, d.index, "x")
            gammas.append(_phase_x(d, b, glob.Z, k, cfg))
        tau_k = engine.global_prox(glob, k, cfg)
        contribs = [engine.z_contribution(b, glob.Z, tau_k) for b in blocks]
        num, den, msgs = ring_aggregate([c[0] for c in contribs], [c[1] for c in contribs])
        self.messages["z_aggregation"] += msgs
        Z_new = engine.z_closed_form(num, den, datas[0].lower, datas[0].upper)
        for d in datas:
            self._log(k, d.index, "z")
        glob.Z_prev, glob.Z, glob.k = glob.Z, Z_new, k + 1
        acc = None
        for d, b, g in zip(datas, blocks, gammas):
            self._log(k, d.index, "y")
            G_val = _phase_y(d, b, g, cfg)
            s = _phase_duals(d, b, Z_new, G_val, k, cfg)
            acc = s if acc is None else _combine(acc, s)
        self.messages["reduce"] += len(blocks)
        return acc

    def close(self):
        pass


class _Inboxes:
    def __init__(self, N):
        self.queues = [queue.Queue() for _ in range(N)]
        self._lock = threading.Lock()
        self.counts = {"z_aggregation": 0, "reduce": 0}

    def send(self, dst, kind, k, payload):
        with self._lock:
            self.counts["z_aggregation" if kind in ("partial", "Z") else "reduce"] += 1
        self.queues[dst].put((kind, k, payload))

    def recv(self, i, kind, k, timeout=60.0):
        try:
            got_kind, got_k, payload = self.queues[i].get(timeout=timeout)
        except queue.Empty as exc:
            raise ProtocolError(f"block {i}: no '{kind}' message for iteration {k}") from exc
        if got_kind != kind or got_k != k:
            raise ProtocolError(
                f"block {i}: expected '{kind}' for iteration {k}, got '{got_kind}' for {got_k}"
            )
        return payload


class _Worker(threading.Thread):
    """Owns a fixed, ascending set of blocks for the lifetime of a solve."""

    def __init__(self, own, datas, blocks, glob, cfg, inbox, results, events):
        super().__init__(daemon=True)
        self.own = own
        self.datas, self.blocks, self.cfg = datas, blocks, cfg
        self.glob = glob.copy()  # private replica, refreshed from broadcasts
        self.inbox, self.results, self.events = inbox, results, events
        self.commands: queue.Queue = queue.Queue()
        self.N = len(blocks)

    def _log(self, k, i, phase):
        if self.events is not None:
            self.events.append((k, i, phase))

    def run(self):
        while True:
            cmd = self.commands.get()
            if cmd is None:
                return
            try:
                self._iterate(cmd)
                self.results.put(("ack", self.own[0], None))
            except Exception as exc:  # surfaced to the driver
                self.results.put(("error", self.own[0], exc))

    def _iterate(self, k):
        N, cfg, glob = self.N, self.cfg, self.glob
        last = N - 1
        failure = None
        gammas = {}
        for i in self.own:
            self._log(k, i, "x")
            try:
                gammas[i] = _phase_x(self.datas[i], self.blocks[i], glob.Z, k, cfg)
            except InnerSolverError as exc:
                failure = failure or str(exc)
        tau_k = engine.global_prox(glob, k, cfg)

        # forward pass of (numerator, denominator, failure)
        for i in self.own:
            v, w = engine.z_contribution(self.blocks[i], glob.Z, tau_k)
            if i == 0:
                partial = (v, w, failure)
            else:
                num, den, fail = self.inbox.recv(i, "partial", k)
                partial = (num + v, den + w, fail or failure)
            if i < last:
                self.inbox.send(i + 1, "partial", k, partial)
            else:
                num, den, fail = partial
                Z_new = None if fail else engine.z_closed_form(
                    num, den, self.datas[0].lower, self.datas[0].upper)
                for j in range(last):
                    self.inbox.send(j, "Z", k, (Z_new, fail))
                bcast = (Z_new, fail)
        for i in self.own:
            if i != last:
                bcast = self.inbox.recv(i, "Z", k)
            self._log(k, i, "z")
        Z_new, fail = bcast
        if fail:
            self.results.put(("reduce", k, ("failure", fail)))
            return
        glob.Z_prev, glob.Z, glob.k = glob.Z, Z_new, k + 1

        for i in self.own:
            d, b = self.datas[i], self.blocks[i]
            self._log(k, i, "y")
            G_val = _phase_y(d, b, gammas[i], cfg)
            s = _phase_duals(d, b, Z_new, G_val, k, cfg)
            if i > 0:
                s = _combine(self.inbox.recv(i, "reduce", k), s)
            if i < last:
                self.inbox.send(i + 1, "reduce", k, s)
            else:
                self.inbox.counts["reduce"] += 1
                self.results.put(("reduce", k, ("ok", s, Z_new)))


class _ThreadedExecutor:
    def __init__(self, datas, blocks, glob, cfg, threads, events=None):
        N = len(blocks)
        T = min(threads, N)
        self.glob = glob
        self.inbox = _Inboxes(N)
        self.results: queue.Queue = queue.Queue()
        self.workers = [
            _Worker([i for i in range(N) if i % T == t], datas, blocks, glob, cfg,
                    self.inbox, self.results, events)
            for t in range(T)
        ]
        for w in self.workers:
            w.start()

    @property
    def messages(self):
        return dict(self.inbox.counts)

    def iterate(self, k):
        for w in self.workers:
            w.commands.put(k)
        summary, error = None, None
        acks = 0
        # barrier: every worker acknowledges before the driver moves on
        while acks < len(self.workers):
            kind, _, payload = self.results.get()
            if kind == "ack":
                acks += 1
            elif kind == "error":
                acks += 1
                error = error or payload
            else:
                summary = payload
        if error is not None:
            raise error
        if summary[0] == "failure":
            raise InnerSolverError(summary[1])
        _, s, Z_new = summary
        self.glob.Z_prev, self.glob.Z, self.glob.k = self.glob.Z, Z_new, k + 1
        return s

    def close(self):
        for w in self.workers:
            w.commands.put(None)
        for w in self.workers:
            w.join()


def run(
    spec: ProblemSpec,
    plan: PartitionPlan,
    cfg: SolverConfig | None = None,
    *,
    threads: int = 1,
    trace_sink: TraceWriter | None = None,
    rate_check: bool = False,
    events: list | None = None,
    initial: tuple[list[BlockState], GlobalState] | None = None,
) -> SolveReport:
    """Solve ``spec`` with the consensus-block augmented Lagrangian iteration.

    ``threads=0`` means one worker per consensus block.  ``events``, when
    given, collects ``(k, block, phase)`` tuples for ordering checks.
    ``initial`` overrides the default starting point.
    """
    cfg = cfg or SolverConfig()
    slack = slack_upper_bounds(spec, plan)
    datas, blocks, glob = engine.initial_state(spec, plan, slack, cfg)
    if initial is not None:
        blocks = [b.copy() for b in initial[0]]
        glob = initial[1].copy()
    if threads < 0:
        raise ValueError("threads must be >= 0")
    threads = plan.N if threads == 0 else threads

    X0 = [b.X.copy() for b in blocks]
    Y0 = [b.Y.copy() for b in blocks]
    Z0 = glob.Z.copy()
    prox0 = engine.prox_params(0, cfg, blocks, glob)

    trace: list[IterationTrace] = []

    def emit(k, L, res, clamped, elapsed):
        t = IterationTrace(k, L, *res, spec.objective(glob.Z), clamped, elapsed)
        trace.append(t)
        if trace_sink is not None:
            record_trace(trace_sink, t)
        return t

    t0 = time.perf_counter()
    emit(0, engine.merit(datas, blocks, glob.Z, cfg),
         engine.residuals(datas, blocks, glob.Z), 0, time.perf_counter() - t0)

    if threads > 1 and plan.N > 1:
        executor = _ThreadedExecutor(datas, blocks, glob, cfg, threads, events)
    else:
        executor = _SerialExecutor(datas, blocks, glob, cfg, events)

    status, message = "max_iters", ""
    clamp_total = 0
    try:
        for k in range(cfg.max_iters):
            t0 = time.perf_counter()
            try:
                L, res, clamped = executor.iterate(k)
            except InnerSolverError as exc:
                status, message = "inner_failure", str(exc)
                log.error("inner solver failure at k=%d: %s", k, exc)
                break
            clamp_total += clamped
            prev = trace[-1].L_k
            t = emit(k + 1, L, res, clamped, time.perf_counter() - t0)
            if t.residual < cfg.tol_residual and abs(L - prev) < cfg.tol_merit:
                status = "converged"
                break
    finally:
        executor.close()

    flagged = [np.flatnonzero(f).tolist() for f in slack.flagged]
    if status == "max_iters" and slack.any_flagged:
        status = "infeasible_flagged"
        message = "inequality rows positive over the whole box: " + json.dumps(flagged)

    report = SolveReport(
        status=status,
        Z=glob.Z.copy(),
        blocks=blocks,
        trace=trace,
        iterations=trace[-1].k,
        f_Z=spec.objective(glob.Z),
        clamp_total=clamp_total,
        messages=dict(executor.messages),
        flagged_rows=flagged,
        message=message,
    )
    if rate_check:
        report.rate = check_rate(report, X0, Z0, Y0, prox0, cfg, spec)
    return report


def check_rate(report: SolveReport, X0, Z0, Y0, prox0, cfg: SolverConfig, spec: ProblemSpec) -> dict:
    """Post-hoc scan of the trace against the ``C/k`` bound, using the final point."""
    try:
        C = engine.rate_certificate(
            X0, Z0, Y0, prox0, [b.rho for b in report.blocks],
            report.Z, [b.Y for b in report.blocks], cfg,
        )
    except ValueError as exc:
        return {"applicable": False, "reason": str(exc)}
    N_f = len(report.blocks) * spec.objective(report.Z)
    L = [t.L_k for t in report.trace]
    bad = engine.rate_violations(L, N_f, C)
    return {
        "applicable": True,
        "C": C,
        "N_f_inf": N_f,
        "checked": len(L) - 1,
        "violations": len(bad),
        "violating_k": bad[:100],
        "holds": not bad,
    }
