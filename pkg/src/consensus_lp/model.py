"""LP instances: representation, JSON I/O, partitioning and slack bounds.

A problem is

    minimize    <cost, z>
    subject to  A_G z + b_G <= 0,   A_H z + b_H = 0,   lower <= z <= upper

with finite bounds on every variable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ProblemError(ValueError):
    """Raised for malformed or inconsistent problem data."""


def _as_matrix(rows, n: int, name: str) -> np.ndarray:
    a = np.asarray(rows, dtype=float)
    if a.size == 0:
        return np.zeros((0, n))
    if a.ndim != 2:
        raise ProblemError(f"{name} must be a list of rows")
    if a.shape[1] != n:
        raise ProblemError(
            f"dimension mismatch: {name} has {a.shape[1]} columns, expected {n}"
        )
    return a


def _as_vector(values, size: int, name: str) -> np.ndarray:
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.shape[0] != size:
        raise ProblemError(
            f"dimension mismatch: {name} has length {v.shape[0]}, expected {size}"
        )
    return v


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    n: int
    cost: np.ndarray
    A_G: np.ndarray
    b_G: np.ndarray
    A_H: np.ndarray
    b_H: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        n = self.n
        if not isinstance(n, (int, np.integer)) or n < 1:
            raise ProblemError(f"n must be a positive integer, got {n!r}")
        A_G = _as_matrix(self.A_G, n, "A_G")
        A_H = _as_matrix(self.A_H, n, "A_H")
        values = {
            "cost": _as_vector(self.cost, n, "cost"),
            "A_G": A_G,
            "b_G": _as_vector(self.b_G, A_G.shape[0], "b_G"),
            "A_H": A_H,
            "b_H": _as_vector(self.b_H, A_H.shape[0], "b_H"),
            "lower": _as_vector(self.lower, n, "lower"),
            "upper": _as_vector(self.upper, n, "upper"),
        }
        for name, arr in values.items():
            if not np.all(np.isfinite(arr)):
                raise ProblemError(f"non-finite entry in {name}")
        if np.any(values["lower"] > values["upper"]):
            j = int(np.argmax(values["lower"] > values["upper"]))
            raise ProblemError(f"lower > upper at index {j}")
        for name, arr in values.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n", int(n))

    @property
    def p(self) -> int:
        return self.A_G.shape[0]

    @property
    def q(self) -> int:
        return self.A_H.shape[0]

    def objective(self, z) -> float:
        return float(self.cost @ np.asarray(z, dtype=float))

    def G(self, z) -> np.ndarray:
        return self.A_G @ z + self.b_G

    def H(self, z) -> np.ndarray:
        return self.A_H @ z + self.b_H

    def __eq__(self, other):
        if not isinstance(other, ProblemSpec):
            return NotImplemented
        return self.n == other.n and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("cost", "A_G", "b_G", "A_H", "b_H", "lower", "upper")
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "cost": self.cost.tolist(),
            "A_G": self.A_G.tolist(),
            "b_G": self.b_G.tolist(),
            "A_H": self.A_H.tolist(),
            "b_H": self.b_H.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
        }


_KEYS = ("n", "cost", "A_G", "b_G", "A_H", "b_H", "lower", "upper")


def parse_problem(text: str) -> ProblemSpec:
    """Parse the JSON problem format into a validated :class:`ProblemSpec`."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemError(f"malformed problem file: {exc}") from exc
    if not isinstance(data, dict):
        raise ProblemError("problem file must contain a JSON object")
    missing = [k for k in _KEYS if k not in data]
    if missing:
        raise ProblemError(f"missing keys: {', '.join(missing)}")
    try:
        return ProblemSpec(**{k: data[k] for k in _KEYS})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ProblemError):
            raise
        raise ProblemError(f"malformed problem file: {exc}") from exc


def dump_problem(spec: ProblemSpec) -> str:
    # json writes floats with repr(), so parse(dump(spec)) is bit-exact
    return json.dumps(spec.to_dict())


@dataclass(frozen=True)
class PartitionPlan:
    N: int
    M: int
    ineq_rows: tuple[np.ndarray, ...]
    eq_rows: tuple[np.ndarray, ...]
    col_ranges: tuple[tuple[int, int], ...]

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(b - a for a, b in self.col_ranges)


def partition(spec: ProblemSpec, N: int, M: int) -> PartitionPlan:
    """Deal rows round-robin over ``N`` blocks and split columns into ``M`` ranges.

    Row ``r`` goes to block ``r mod N``; the first ``n mod M`` column ranges
    get one extra column.
    """
    if N < 1 or M < 1:
        raise ValueError("N and M must be at least 1")
    if M > spec.n:
        raise ValueError(f"M={M} exceeds the number of variables n={spec.n}")
    ineq = tuple(np.arange(i, spec.p, N) for i in range(N))
    eq = tuple(np.arange(i, spec.q, N) for i in range(N))
    base, extra = divmod(spec.n, M)
    ranges = []
    start = 0
    for l in range(M):
        size = base + (1 if l < extra else 0)
        ranges.append((start, start + size))
        start += size
    return PartitionPlan(N=N, M=M, ineq_rows=ineq, eq_rows=eq, col_ranges=tuple(ranges))


@dataclass(frozen=True)
class SlackBounds:
    """Per-block slack upper bounds ``u_Y``.

    ``flagged[i]`` marks rows whose affine function is positive everywhere on
    the box; such a row can never be satisfied and its bound is clamped to 0.
    """

    upper: tuple[np.ndarray, ...]
    flagged: tuple[np.ndarray, ...] = field(default=())

    @property
    def any_flagged(self) -> bool:
        return any(f.any() for f in self.flagged)


def interval_min(A: np.ndarray, b: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Minimum of each affine row ``A x + b`` over the box ``[lower, upper]``."""
    return np.minimum(A * lower, A * upper).sum(axis=1) + b


def slack_upper_bounds(spec: ProblemSpec, plan: PartitionPlan) -> SlackBounds:
    uppers, flags = [], []
    for rows in plan.ineq_rows:
        raw = -interval_min(spec.A_G[rows], spec.b_G[rows], spec.lower, spec.upper)
        flags.append(raw < 0)
        uppers.append(np.maximum(raw, 0.0))
    return SlackBounds(upper=tuple(uppers), flagged=tuple(flags))


@dataclass(frozen=True)
class GeneratedInstance:
    spec: ProblemSpec
    x0: np.ndarray
    margin: np.ndarray


def generate_instance_with_witness(
    seed: int,
    n: int,
    p: int,
    q: int,
    *,
    box_low: tuple[float, float] = (-2.0, 0.0),
    box_width: tuple[float, float] = (0.5, 3.0),
    margin: tuple[float, float] = (0.1, 1.0),
) -> GeneratedInstance:
    """Random feasible instance plus the interior point it was built around.

    ``x0`` lies strictly inside the box; inequality rows hold at ``x0`` with
    margin ``s > 0`` and equality rows hold exactly.
    """
    if n < 1 or p < 0 or q < 0:
        raise ValueError("need n >= 1 and p, q >= 0")
    if q > n:
        raise ValueError(f"q={q} exceeds n={n}; equality system would be overdetermined")
    if margin[0] <= 0 or margin[1] < margin[0]:
        raise ValueError("margin range must be positive")
    rng = np.random.default_rng(seed)
    lower = rng.uniform(*box_low, size=n)
    upper = lower + rng.uniform(*box_width, size=n)
    x0 = lower + (upper - lower) * rng.uniform(0.2, 0.8, size=n)
    A_G = rng.normal(size=(p, n))
    s = rng.uniform(*margin, size=p)
    b_G = -A_G @ x0 - s
    A_H = rng.normal(size=(q, n))
    b_H = -A_H @ x0
    cost = rng.normal(size=n)
    spec = ProblemSpec(n, cost, A_G, b_G, A_H, b_H, lower, upper)
    return GeneratedInstance(spec=spec, x0=x0, margin=s)


def generate_instance(seed: int, n: int, p: int, q: int, **options) -> ProblemSpec:
    return generate_instance_with_witness(seed, n, p, q, **options).spec
