"""Ground truth for desk-scale instances.

Nothing in here shares code with the iterative solver: the reference LP
solver is a dense bounded-variable primal simplex with Bland's rule, checked
against brute-force vertex enumeration; the 1-D and box-QP oracles minimize
by golden section and active-set enumeration respectively.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from consensus_lp.model import ProblemSpec

SIMPLEX_MAX_N = 50
ENUM_MAX_N = 12


class OracleCapError(ValueError):
    """Instance is larger than the oracle is meant to handle."""


class Infeasible(Exception):
    pass


@dataclass
class OptimalCertificate:
    status: str  # "optimal" | "infeasible"
    x_star: np.ndarray | None = None
    f_star: float | None = None
    kkt_residual: float | None = None
    mu: np.ndarray | None = None
    nu: np.ndarray | None = None
    pivots: int = 0

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "f_star": self.f_star,
            "x_star": None if self.x_star is None else self.x_star.tolist(),
            "kkt_residual": self.kkt_residual,
        }


# --------------------------------------------------------------------------
# bounded-variable primal simplex


def _simplex(A, b, cost, lo, hi, basis, at_upper, x, eps=1e-9, max_pivots=100000):
    """Minimize ``cost @ x`` s.t. ``A x = b``, ``lo <= x <= hi`` from a feasible basis.

    Nonbasic variables sit at a bound (``at_upper`` says which).  Entering
    and leaving variables are picked by Bland's smallest-index rule.
    Mutates ``basis``, ``at_upper`` and ``x``; returns the pivot count.
    """
    m, nv = A.shape
    pivots = 0
    while True:
        B = A[:, basis]
        nonbasic = np.ones(nv, dtype=bool)
        nonbasic[basis] = False
        x[basis] = np.linalg.solve(B, b - A[:, nonbasic] @ x[nonbasic])
        y = np.linalg.solve(B.T, cost[basis])
        d = cost - A.T @ y

        entering = None
        for j in np.flatnonzero(nonbasic):
            if hi[j] - lo[j] <= 0:
                continue
            if (not at_upper[j] and d[j] < -eps) or (at_upper[j] and d[j] > eps):
                entering = j
                break
        if entering is None:
            return pivots, y
        if pivots >= max_pivots:
            raise RuntimeError("simplex pivot limit reached")

        j = entering
        direction = -1.0 if at_upper[j] else 1.0
        alpha = np.linalg.solve(B, A[:, j])
        step = hi[j] - lo[j]
        leave_pos, leave_to_upper = None, False
        for pos in range(m):
            rate = direction * alpha[pos]
            var = basis[pos]
            if rate > 1e-12:
                t = (x[var] - lo[var]) / rate
                to_upper = False
            elif rate < -1e-12 and np.isfinite(hi[var]):
                t = (hi[var] - x[var]) / -rate
                to_upper = True
            else:
                continue
            t = max(t, 0.0)
            if t < step - 1e-12 or (
                leave_pos is not None and abs(t - step) <= 1e-12 and var < basis[leave_pos]
            ):
                step, leave_pos, leave_to_upper = t, pos, to_upper
        if not np.isfinite(step):
            raise RuntimeError("unbounded direction in a box-bounded LP")

        x[j] += direction * step
        x[basis] -= direction * step * alpha
        if leave_pos is None:
            at_upper[j] = not at_upper[j]
        else:
            var = basis[leave_pos]
            at_upper[var] = leave_to_upper
            x[var] = hi[var] if leave_to_upper else lo[var]
            basis[leave_pos] = j
            at_upper[j] = False
        pivots += 1


def solve_reference(spec: ProblemSpec) -> OptimalCertificate:
    """Optimal value of the boxed LP by two-phase bounded-variable simplex."""
    n, p, q = spec.n, spec.p, spec.q
    if n > SIMPLEX_MAX_N:
        raise OracleCapError(f"n={n} over oracle cap ({SIMPLEX_MAX_N})")
    m = p + q
    width = spec.upper - spec.lower
    # shift x = lower + x', 0 <= x' <= width
    A_rows = np.vstack([spec.A_G, spec.A_H]) if m else np.zeros((0, n))
    rhs = -np.concatenate([spec.b_G, spec.b_H]) - A_rows @ spec.lower
    sign = np.where(rhs < 0, -1.0, 1.0)

    # columns: x' (n) | slacks (p) | artificials (m)
    A = np.zeros((m, n + p + m))
    A[:, :n] = A_rows
    A[np.arange(p), n + np.arange(p)] = 1.0
    A *= sign[:, None]
    A[np.arange(m), n + p + np.arange(m)] = 1.0
    b = sign * rhs

    lo = np.zeros(n + p + m)
    hi = np.concatenate([width, np.full(p, np.inf), np.full(m, np.inf)])
    x = np.zeros(n + p + m)
    at_upper = np.zeros(n + p + m, dtype=bool)
    basis = list(range(n + p, n + p + m))
    x[basis] = b

    pivots = 0
    if m:
        c1 = np.zeros(n + p + m)
        c1[n + p:] = 1.0
        pivots, _ = _simplex(A, b, c1, lo, hi, basis, at_upper, x)
        infeas = x[n + p:].sum()
        if infeas > 1e-9 * max(1.0, np.abs(b).max()):
            return OptimalCertificate(status="infeasible", pivots=pivots)
        hi[n + p:] = 0.0  # artificials pinned at zero from here on
        x[n + p:] = np.where(np.isin(np.arange(m), np.array(basis) - n - p), x[n + p:], 0.0)

    c2 = np.concatenate([spec.cost, np.zeros(p + m)])
    more, y = _simplex(A, b, c2, lo, hi, basis, at_upper, x)
    pivots += more
    x_star = spec.lower + np.clip(x[:n], 0.0, width)
    # multipliers of the unflipped rows; Lagrangian sign convention c + A'mu = reduced cost
    y_orig = sign * y
    mu = -y_orig[:p]
    nu = -y_orig[p:]
    mu = np.maximum(mu, 0.0) if p else mu
    cert = OptimalCertificate(
        status="optimal", x_star=x_star, f_star=spec.objective(x_star), mu=mu, nu=nu, pivots=pivots
    )
    cert.kkt_residual = kkt_residual(spec, x_star, mu, nu)
    return cert


# --------------------------------------------------------------------------
# vertex enumeration


def _bound_patterns(lower, upper):
    k = lower.size
    bits = (np.arange(2**k)[None, :] >> np.arange(k)[:, None]) & 1
    return np.where(bits == 1, upper[:, None], lower[:, None])


def enumerate_vertices(spec: ProblemSpec, tol: float = 1e-9, max_solves: int = 500_000) -> OptimalCertificate:
    """Best basic feasible point by exhaustive enumeration.

    A vertex has every equality row active plus ``r`` inequality rows; the
    ``q + r`` free variables are solved for and the rest sit at a bound.
    """
    n, p, q = spec.n, spec.p, spec.q
    if n > ENUM_MAX_N:
        raise OracleCapError(f"n={n} over vertex-enumeration cap ({ENUM_MAX_N})")
    if q > n:
        return OptimalCertificate(status="infeasible")
    total = sum(math.comb(p, r) * math.comb(n, q + r) for r in range(0, min(p, n - q) + 1))
    if total > max_solves:
        raise OracleCapError(f"vertex enumeration needs {total} basis solves")

    best_f, best_x = np.inf, None
    for r in range(0, min(p, n - q) + 1):
        k = q + r
        for R in itertools.combinations(range(p), r):
            A_act = np.vstack([spec.A_H, spec.A_G[list(R)]])
            rhs = -np.concatenate([spec.b_H, spec.b_G[list(R)]])
            for F in itertools.combinations(range(n), k):
                F = list(F)
                fixed = [j for j in range(n) if j not in F]
                P = _bound_patterns(spec.lower[fixed], spec.upper[fixed])
                X = np.empty((n, P.shape[1]))
                X[fixed] = P
                if k:
                    Bm = A_act[:, F]
                    if np.linalg.cond(Bm) > 1e12:
                        continue
                    X[F] = np.linalg.solve(Bm, rhs[:, None] - A_act[:, fixed] @ P)
                ok = np.all(X >= spec.lower[:, None] - tol, axis=0)
                ok &= np.all(X <= spec.upper[:, None] + tol, axis=0)
                if p:
                    ok &= np.all(spec.A_G @ X + spec.b_G[:, None] <= tol, axis=0)
                if q:
                    ok &= np.all(np.abs(spec.A_H @ X + spec.b_H[:, None]) <= tol, axis=0)
                if not ok.any():
                    continue
                f = spec.cost @ X[:, ok]
                j = int(np.argmin(f))
                if f[j] < best_f:
                    best_f, best_x = float(f[j]), X[:, ok][:, j].copy()
    if best_x is None:
        return OptimalCertificate(status="infeasible")
    return OptimalCertificate(status="optimal", x_star=best_x, f_star=best_f)


# --------------------------------------------------------------------------
# KKT residual


def kkt_residual(spec: ProblemSpec, x, mu, nu, W=None, active_tol: float = 1e-9) -> float:
    """Largest violation among stationarity, feasibility and complementarity.

    Stationarity is measured as the distance of ``-W - A_G'mu - A_H'nu - c``
    to the normal cone of the box at ``x``.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    nu = np.asarray(nu, dtype=float).reshape(-1)
    W = np.zeros(spec.n) if W is None else np.asarray(W, dtype=float)
    v = -W - spec.A_G.T @ mu - spec.A_H.T @ nu - spec.cost

    at_lo = x - spec.lower <= active_tol * np.maximum(1.0, np.abs(spec.lower))
    at_hi = spec.upper - x <= active_tol * np.maximum(1.0, np.abs(spec.upper))
    dist = np.abs(v)
    dist = np.where(at_lo & ~at_hi, np.maximum(v, 0.0), dist)
    dist = np.where(at_hi & ~at_lo, np.maximum(-v, 0.0), dist)
    dist = np.where(at_lo & at_hi, 0.0, dist)

    G = spec.G(x)
    parts = [
        dist.max(initial=0.0),
        np.maximum(G, 0.0).max(initial=0.0),
        np.abs(spec.H(x)).max(initial=0.0),
        np.maximum(spec.lower - x, 0.0).max(initial=0.0),
        np.maximum(x - spec.upper, 0.0).max(initial=0.0),
        abs(float(mu @ G)) if mu.size else 0.0,
        max(0.0, -mu.min()) if mu.size and mu.min() < -1e-12 else 0.0,
    ]
    return float(max(parts))


# --------------------------------------------------------------------------
# small minimization oracles

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def numeric_minimize(f, a: float, b: float, tol: float = 1e-11) -> float:
    """Golden-section search for the minimizer of a unimodal ``f`` on ``[a, b]``."""
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    # the ends are candidates too when the minimizer sits on the boundary
    mid = 0.5 * (a + b)
    return min((mid, a, b), key=f)


def box_qp_bruteforce(Q, q, lo, hi):
    """Exact minimizer of ``x'Qx/2 + q'x`` on a box by enumerating active sets.

    Every coordinate is at its lower bound, at its upper bound, or free; the
    free ones solve the reduced stationarity system.  For strictly convex
    ``Q`` the best feasible candidate is the global minimizer.
    """
    Q = np.asarray(Q, dtype=float)
    q = np.asarray(q, dtype=float)
    m = q.size
    best, best_x = np.inf, None
    for pattern in itertools.product((0, 1, 2), repeat=m):
        pattern = np.array(pattern)
        x = np.where(pattern == 0, lo, hi).astype(float)
        free = pattern == 2
        if free.any():
            fixed = ~free
            x[free] = np.linalg.solve(Q[np.ix_(free, free)], -q[free] - Q[np.ix_(free, fixed)] @ x[fixed])
            if np.any(x < lo - 1e-14) or np.any(x > hi + 1e-14):
                continue
        val = 0.5 * x @ Q @ x + q @ x
        if val < best:
            best, best_x = val, x
    return best_x, best
