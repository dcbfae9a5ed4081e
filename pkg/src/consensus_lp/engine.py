"""Per-iteration mathematics of the consensus-block augmented Lagrangian method.

Every consensus block ``i`` keeps a private copy ``X_i`` of the decision
vector, a slack ``Y_i`` for its inequality rows and multipliers ``W_i``,
``mu_i``, ``nu_i``.  One iteration is

1. a Gauss-Seidel sweep over the ``M`` column subblocks of every ``X_i``,
   each subblock solved as a proximal box-constrained QP;
2. the common variable ``Z`` from a closed-form, box-clipped average;
3. the slacks ``Y_i`` from a closed-form, box-clipped proximal step;
4. a dual step on ``W_i``, ``mu_i``, ``nu_i``, then clamping.

The functions here are deterministic and mutate only the state passed in.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence, Union

import numba
import numpy as np

from consensus_lp.model import PartitionPlan, ProblemSpec, SlackBounds

Scalars = Union[float, Sequence[float]]

PROX_SCHEDULES = ("constant", "normalized")
PENALTY_MODES = ("full", "consensus-only")
DIRECTIONS = ("descent", "ascent")


class InnerSolverError(RuntimeError):
    """The subblock box-QP did not reach its tolerance within the sweep budget."""


@dataclass
class SolverConfig:
    alpha_W: Scalars = 0.5
    alpha_mu: Scalars = 0.5
    alpha_nu: Scalars = 0.5
    rho: Scalars = 1.0
    sigma0: Scalars = 1.0
    tau0: float = 1.0
    gamma0: Scalars = 1.0
    prox_schedule: str = "constant"
    penalty_mode: str = "full"
    dual_bound: float = 1e6
    ascent_phase_iters: int = 0
    tol_residual: float = 1e-6
    tol_merit: float = 1e-9
    max_iters: int = 50000
    subqp_tol: float = 1e-12
    subqp_max_sweeps: int = 10000

    def __post_init__(self):
        self.validate()

    def validate(self, N: int | None = None) -> None:
        if self.prox_schedule not in PROX_SCHEDULES:
            raise ValueError(f"prox_schedule must be one of {PROX_SCHEDULES}")
        if self.penalty_mode not in PENALTY_MODES:
            raise ValueError(f"penalty_mode must be one of {PENALTY_MODES}")
        for name in ("alpha_W", "alpha_mu", "alpha_nu", "sigma0", "gamma0"):
            vals = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if np.any(vals <= 0):
                raise ValueError(f"{name} must be positive")
            if N is not None and vals.size not in (1, N):
                raise ValueError(f"{name} needs 1 or {N} values, got {vals.size}")
        rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if np.any(rho < 0):
            raise ValueError("rho must be nonnegative")
        if N is not None and rho.size not in (1, N):
            raise ValueError(f"rho needs 1 or {N} values, got {rho.size}")
        for name in ("tau0", "dual_bound", "tol_residual", "tol_merit", "subqp_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.ascent_phase_iters < 0:
            raise ValueError("ascent_phase_iters must be >= 0")
        if self.max_iters < 1 or self.subqp_max_sweeps < 1:
            raise ValueError("max_iters and subqp_max_sweeps must be >= 1")

    def value(self, name: str, i: int) -> float:
        """Per-block value of a coefficient given as a scalar or a sequence."""
        v = getattr(self, name)
        if np.ndim(v) == 0:
            return float(v)
        return float(v[i])

    @property
    def penalty(self) -> float:
        """Weight of the ``G``/``H`` penalty terms (1 in full mode, 0 otherwise)."""
        return 1.0 if self.penalty_mode == "full" else 0.0

    def direction(self, k: int) -> str:
        return "ascent" if k < self.ascent_phase_iters else "descent"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if np.ndim(v) else v
        return out


@dataclass(frozen=True, eq=False)
class BlockData:
    """Constant data owned by one consensus block: its rows and the box."""

    index: int
    cost: np.ndarray
    A_G: np.ndarray
    b_G: np.ndarray
    A_H: np.ndarray
    b_H: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    u_Y: np.ndarray
    col_ranges: tuple[tuple[int, int], ...]
    # A_S^T A_S + C_S^T C_S for every column range S
    grams: tuple[np.ndarray, ...] = field(repr=False)

    @classmethod
    def build(cls, spec: ProblemSpec, plan: PartitionPlan, slack: SlackBounds, i: int) -> "BlockData":
        A_G = spec.A_G[plan.ineq_rows[i]]
        A_H = spec.A_H[plan.eq_rows[i]]
        grams = tuple(
            A_G[:, a:b].T @ A_G[:, a:b] + A_H[:, a:b].T @ A_H[:, a:b]
            for a, b in plan.col_ranges
        )
        return cls(
            index=i,
            cost=spec.cost,
            A_G=A_G,
            b_G=spec.b_G[plan.ineq_rows[i]],
            A_H=A_H,
            b_H=spec.b_H[plan.eq_rows[i]],
            lower=spec.lower,
            upper=spec.upper,
            u_Y=slack.upper[i],
            col_ranges=plan.col_ranges,
            grams=grams,
        )

    def G(self, x: np.ndarray) -> np.ndarray:
        return self.A_G @ x + self.b_G

    def H(self, x: np.ndarray) -> np.ndarray:
        return self.A_H @ x + self.b_H


@dataclass
class BlockState:
    X: np.ndarray
    X_prev: np.ndarray
    Y: np.ndarray
    Y_prev: np.ndarray
    W: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    rho: float
    sigma0: float
    gamma0: float

    def copy(self) -> "BlockState":
        return BlockState(
            self.X.copy(), self.X_prev.copy(), self.Y.copy(), self.Y_prev.copy(),
            self.W.copy(), self.mu.copy(), self.nu.copy(),
            self.rho, self.sigma0, self.gamma0,
        )


@dataclass
class GlobalState:
    Z: np.ndarray
    Z_prev: np.ndarray
    k: int
    tau0: float

    def copy(self) -> "GlobalState":
        return GlobalState(self.Z.copy(), self.Z_prev.copy(), self.k, self.tau0)


@dataclass(frozen=True)
class ProxParams:
    sigma: tuple[float, ...]
    tau: float
    gamma: tuple[float, ...]


def initial_state(
    spec: ProblemSpec, plan: PartitionPlan, slack: SlackBounds, cfg: SolverConfig
) -> tuple[list[BlockData], list[BlockState], GlobalState]:
    """Start from ``X_i = Z = clip(0)``, ``Y_i = clip(-G_i(X_i))`` and zero duals."""
    cfg.validate(plan.N)
    Z0 = np.clip(np.zeros(spec.n), spec.lower, spec.upper)
    datas, blocks = [], []
    for i in range(plan.N):
        d = BlockData.build(spec, plan, slack, i)
        Y0 = np.clip(-d.G(Z0), 0.0, d.u_Y)
        blocks.append(
            BlockState(
                X=Z0.copy(), X_prev=Z0.copy(), Y=Y0, Y_prev=Y0.copy(),
                W=np.zeros(spec.n), mu=np.zeros(d.A_G.shape[0]), nu=np.zeros(d.A_H.shape[0]),
                rho=cfg.value("rho", i), sigma0=cfg.value("sigma0", i), gamma0=cfg.value("gamma0", i),
            )
        )
        datas.append(d)
    return datas, blocks, GlobalState(Z=Z0.copy(), Z_prev=Z0.copy(), k=0, tau0=float(cfg.tau0))


@numba.njit(cache=True)
def _box_qp_cd(Q, q, lo, hi, x, tol, max_sweeps):
    m = x.shape[0]
    g = np.empty(m)
    for sweep in range(1, max_sweeps + 1):
        # fresh gradient each sweep so rounding does not accumulate
        for t in range(m):
            s = q[t]
            for j in range(m):
                s += Q[t, j] * x[j]
            g[t] = s
        change = 0.0
        scale = 1.0
        for j in range(m):
            xj = x[j] - g[j] / Q[j, j]
            if xj < lo[j]:
                xj = lo[j]
            elif xj > hi[j]:
                xj = hi[j]
            d = xj - x[j]
            if d != 0.0:
                for t in range(m):
                    g[t] += Q[t, j] * d
                x[j] = xj
                if abs(d) > change:
                    change = abs(d)
            if abs(xj) > scale:
                scale = abs(xj)
        if change <= tol * scale:
            return sweep, True
    return max_sweeps, False


def box_qp(Q, q, lo, hi, x0, tol=1e-12, max_sweeps=10000):
    """Minimize ``x'Qx/2 + q'x`` over ``lo <= x <= hi`` by cyclic coordinate descent.

    Each coordinate step is the exact clipped 1-D minimizer.  Stops when the
    largest coordinate change in a sweep is at most ``tol * max(1, |x|_inf)``.
    Returns ``(x, sweeps, converged)``.
    """
    x = np.clip(np.array(x0, dtype=float), lo, hi)
    sweeps, ok = _box_qp_cd(
        np.ascontiguousarray(Q, dtype=float), np.ascontiguousarray(q, dtype=float),
        np.ascontiguousarray(lo, dtype=float), np.ascontiguousarray(hi, dtype=float),
        x, float(tol), int(max_sweeps),
    )
    return x, sweeps, ok


def subblock_qp(data: BlockData, block: BlockState, Z: np.ndarray, l: int, sigma_k: float, penalty: float):
    """Hessian and linear term of the subblock-``l`` objective in its own columns.

    Columns outside ``l`` are read from ``block.X`` as they currently stand
    (already-updated subblocks carry their new values).
    """
    a, b = data.col_ranges[l]
    rho = block.rho
    x = block.X
    m = b - a
    Q = (rho + sigma_k) * np.eye(m)
    q = data.cost[a:b] + block.W[a:b] - rho * Z[a:b] - sigma_k * x[a:b]
    if data.A_G.shape[0]:
        AS = data.A_G[:, a:b]
        q = q + AS.T @ block.mu
        if penalty:
            # residual of the frozen columns: A x + b + Y with this subblock zeroed
            rest = data.A_G @ x - AS @ x[a:b] + data.b_G + block.Y
            q = q + penalty * rho * (AS.T @ rest)
    if data.A_H.shape[0]:
        CS = data.A_H[:, a:b]
        q = q + CS.T @ block.nu
        if penalty:
            rest = data.A_H @ x - CS @ x[a:b] + data.b_H
            q = q + penalty * rho * (CS.T @ rest)
    if penalty:
        Q = Q + penalty * rho * data.grams[l]
    return Q, q


@numba.njit(cache=True)
def _subblock_kernel(cost, A_G, shift_G, mu, A_H, shift_H, nu, W, Z, x, gram,
                     lo, hi, a, b, rho, sigma, penalty, tol, max_sweeps):
    # same quantities as subblock_qp, assembled without temporaries
    m = b - a
    pr = penalty * rho
    Q = np.empty((m, m))
    q = np.empty(m)
    rG = np.empty(A_G.shape[0])
    rH = np.empty(A_H.shape[0])
    for r in range(A_G.shape[0]):
        s = shift_G[r]
        for j in range(x.shape[0]):
            if j < a or j >= b:
                s += A_G[r, j] * x[j]
        rG[r] = s
    for r in range(A_H.shape[0]):
        s = shift_H[r]
        for j in range(x.shape[0]):
            if j < a or j >= b:
                s += A_H[r, j] * x[j]
        rH[r] = s
    for t in range(m):
        c = a + t
        v = cost[c] + W[c] - rho * Z[c] - sigma * x[c]
        for r in range(A_G.shape[0]):
            v += A_G[r, c] * (mu[r] + pr * rG[r])
        for r in range(A_H.shape[0]):
            v += A_H[r, c] * (nu[r] + pr * rH[r])
        q[t] = v
        for u in range(m):
            Q[t, u] = pr * gram[t, u]
        Q[t, t] += rho + sigma
    xs = x[a:b].copy()
    sweeps, ok = _box_qp_cd(Q, q, lo[a:b], hi[a:b], xs, tol, max_sweeps)
    return xs, sweeps, ok


def update_x_subblock(
    data: BlockData, block: BlockState, Z: np.ndarray, l: int, sigma_k: float, cfg: SolverConfig
) -> np.ndarray:
    """New value of subblock ``l`` of ``X_i``; ``block.X`` is left untouched."""
    if not sigma_k > 0:
        raise ValueError("proximal parameter sigma_k must be positive")
    a, b = data.col_ranges[l]
    x, sweeps, ok = _subblock_kernel(
        data.cost, data.A_G, data.b_G + block.Y, block.mu, data.A_H, data.b_H, block.nu,
        block.W, Z, block.X, data.grams[l], data.lower, data.upper,
        a, b, block.rho, float(sigma_k), cfg.penalty, cfg.subqp_tol, cfg.subqp_max_sweeps,
    )
    if not ok:
        raise InnerSolverError(
            f"block {data.index} subblock {l}: no convergence in {sweeps} sweeps"
        )
    return x


def update_x_block(data: BlockData, block: BlockState, Z: np.ndarray, sigma_k: float, cfg: SolverConfig) -> None:
    """Gauss-Seidel sweep over all subblocks of ``X_i`` (in place)."""
    block.X_prev = block.X.copy()
    for l, (a, b) in enumerate(data.col_ranges):
        block.X[a:b] = update_x_subblock(data, block, Z, l, sigma_k, cfg)


def z_contribution(block: BlockState, Z_k: np.ndarray, tau_k: float) -> tuple[np.ndarray, float]:
    """One block's share ``(rho X + W + tau Z^k, rho + tau)`` of the Z update."""
    return block.rho * block.X + block.W + tau_k * Z_k, block.rho + tau_k


def z_closed_form(numerator: np.ndarray, denominator: float, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Box-constrained minimizer of the Z objective.

    The curvature is a scalar times the identity, so projecting the
    unconstrained minimizer onto the box is exact.
    """
    if not denominator > 0:
        raise ValueError("Z-update denominator must be positive")
    return np.clip(np.asarray(numerator) / denominator, lower, upper)


def update_y(G_val: np.ndarray, Y_k: np.ndarray, mu: np.ndarray, rho: float, gamma_k: float, u_Y: np.ndarray) -> np.ndarray:
    """Closed-form slack update ``clip((-rho G - mu + gamma Y^k)/(rho + gamma), 0, u_Y)``.

    Pass ``rho=0`` when the ``G`` residual carries no penalty.
    """
    if not rho + gamma_k > 0:
        raise ValueError("rho + gamma_k must be positive")
    return np.clip((-rho * G_val - mu + gamma_k * Y_k) / (rho + gamma_k), 0.0, u_Y)


def update_duals(
    W: np.ndarray,
    mu: np.ndarray,
    nu: np.ndarray,
    cons_res: np.ndarray,
    ineq_res: np.ndarray,
    eq_res: np.ndarray,
    alphas: tuple[float, float, float],
    dual_bound: float,
    direction: str = "descent",
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Dual step followed by clamping to ``[-dual_bound, dual_bound]``.

    ``descent`` subtracts ``alpha * residual``; ``ascent`` adds it.
    Returns the new ``(W, mu, nu)`` and the number of clamped entries.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    sign = -1.0 if direction == "descent" else 1.0
    a_W, a_mu, a_nu = alphas
    out = []
    clamped = 0
    for v, r, a in ((W, cons_res, a_W), (mu, ineq_res, a_mu), (nu, eq_res, a_nu)):
        raw = v + sign * a * r
        clamped += int(np.count_nonzero(np.abs(raw) > dual_bound))
        out.append(np.clip(raw, -dual_bound, dual_bound))
    return out[0], out[1], out[2], clamped


def _normalized(base: float, delta_norm: float, k: int) -> float:
    if k == 0 or delta_norm == 0.0:
        return base
    return base / delta_norm


def block_prox(block: BlockState, k: int, cfg: SolverConfig) -> tuple[float, float]:
    """``(sigma_k, gamma_k)`` for one block."""
    if cfg.prox_schedule == "constant":
        return block.sigma0, block.gamma0
    return (
        _normalized(block.sigma0, float(np.linalg.norm(block.X - block.X_prev)), k),
        _normalized(block.gamma0, float(np.linalg.norm(block.Y - block.Y_prev)), k),
    )


def global_prox(glob: GlobalState, k: int, cfg: SolverConfig) -> float:
    if cfg.prox_schedule == "constant":
        return glob.tau0
    return _normalized(glob.tau0, float(np.linalg.norm(glob.Z - glob.Z_prev)), k)


def prox_params(k: int, cfg: SolverConfig, blocks: Sequence[BlockState], glob: GlobalState) -> ProxParams:
    """Proximal coefficients at iteration ``k``.

    Under the normalized schedule each base value is divided by the norm of
    the last step of its variable; at ``k = 0`` and after a zero step the base
    value is used as is.
    """
    pairs = [block_prox(b, k, cfg) for b in blocks]
    return ProxParams(
        sigma=tuple(s for s, _ in pairs),
        tau=global_prox(glob, k, cfg),
        gamma=tuple(g for _, g in pairs),
    )


def block_merit(data: BlockData, block: BlockState, Z: np.ndarray, penalty: float,
                G_val: np.ndarray | None = None, H_val: np.ndarray | None = None) -> float:
    """One block's term of ``L^k``; ``G_val``/``H_val`` may be passed in if already known."""
    d = block.X - Z
    g = (data.G(block.X) if G_val is None else G_val) + block.Y
    h = data.H(block.X) if H_val is None else H_val
    quad = d @ d + penalty * (g @ g + h @ h)
    return float(
        data.cost @ block.X + 0.5 * block.rho * quad + block.W @ d + block.mu @ g + block.nu @ h
    )


def merit(datas: Sequence[BlockData], blocks: Sequence[BlockState], Z: np.ndarray, cfg: SolverConfig) -> float:
    """Augmented-Lagrangian value ``L^k`` summed over blocks in index order."""
    total = 0.0
    for d, b in zip(datas, blocks):
        total += block_merit(d, b, Z, cfg.penalty)
    return total


def _inf_norm(v: np.ndarray) -> float:
    return float(np.abs(v).max(initial=0.0))


def block_residuals(data: BlockData, block: BlockState, Z: np.ndarray,
                    G_val: np.ndarray | None = None, H_val: np.ndarray | None = None) -> tuple[float, float, float]:
    return (
        _inf_norm(block.X - Z),
        _inf_norm((data.G(block.X) if G_val is None else G_val) + block.Y),
        _inf_norm(data.H(block.X) if H_val is None else H_val),
    )


def residuals(datas: Sequence[BlockData], blocks: Sequence[BlockState], Z: np.ndarray) -> tuple[float, float, float]:
    """Max-norm consensus, inequality and equality residuals over all blocks."""
    per = [block_residuals(d, b, Z) for d, b in zip(datas, blocks)]
    return tuple(max(r[j] for r in per) for j in range(3))


def rate_certificate(
    X0: Sequence[np.ndarray],
    Z0: np.ndarray,
    Y0: Sequence[np.ndarray],
    prox0: ProxParams,
    rho: Sequence[float],
    Z_inf: np.ndarray,
    Y_inf: Sequence[np.ndarray],
    cfg: SolverConfig,
) -> float:
    """Constant ``C`` of the ``L^k - N f(Z_inf) <= C / k`` bound.

    Only defined without the ``G``/``H`` penalties and with a nonincreasing
    (constant) proximal schedule.
    """
    if cfg.penalty_mode != "consensus-only":
        raise ValueError("rate certificate requires penalty_mode='consensus-only'")
    if cfg.prox_schedule != "constant":
        raise ValueError("rate certificate requires a nonincreasing (constant) prox schedule")
    dz = np.asarray(Z0) - Z_inf
    C = 0.0
    for i in range(len(X0)):
        dx = np.asarray(X0[i]) - Z_inf
        dy = np.asarray(Y0[i]) - Y_inf[i]
        C += (
            0.5 * prox0.sigma[i] * (dx @ dx)
            + 0.5 * (rho[i] + prox0.tau) * (dz @ dz)
            + 0.5 * prox0.gamma[i] * (dy @ dy)
        )
    return float(C)


def rate_violations(L: Sequence[float], N_f_inf: float, C: float, slack: float = 1e-8) -> list[int]:
    """Iterations ``k >= 1`` where ``L[k] - N_f_inf > C/k + slack``."""
    return [k for k in range(1, len(L)) if L[k] - N_f_inf > C / k + slack]
