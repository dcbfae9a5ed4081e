import numpy as np
import pytest

from consensus_lp import oracle
from consensus_lp.model import generate_instance

from conftest import make_spec


class TestSolveReference:
    def test_corner_cut(self):
        spec = make_spec([-1, -1], [0, 0], [1, 1], A_G=[[1, 1]], b_G=[-1])
        cert = oracle.solve_reference(spec)
        assert cert.status == "optimal"
        assert cert.f_star == pytest.approx(-1.0, abs=1e-12)
        assert enumerate_f(spec) == pytest.approx(-1.0, abs=1e-12)

    def test_unconstrained_box(self):
        cert = oracle.solve_reference(make_spec([1], [2], [3]))
        assert cert.f_star == 2.0
        assert cert.x_star.tolist() == [2.0]

    def test_infeasible_equality(self):
        spec = make_spec([0, 0], [0, 0], [1, 1], A_H=[[1, 1]], b_H=[-3])
        assert oracle.solve_reference(spec).status == "infeasible"
        assert oracle.enumerate_vertices(spec).status == "infeasible"

    def test_cap(self):
        with pytest.raises(oracle.OracleCapError):
            oracle.solve_reference(generate_instance(0, 51, 0, 0))
        with pytest.raises(oracle.OracleCapError):
            oracle.enumerate_vertices(generate_instance(0, 13, 0, 0))

    @pytest.mark.parametrize("seed", range(40))
    def test_generated_never_infeasible(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 31))
        spec = generate_instance(seed, n, int(rng.integers(0, 2 * n + 1)), int(rng.integers(0, n // 2 + 1)))
        cert = oracle.solve_reference(spec)
        assert cert.status == "optimal"
        assert cert.kkt_residual <= 1e-7


def enumerate_f(spec):
    return oracle.enumerate_vertices(spec).f_star


class TestKKT:
    def test_interior_cost(self):
        spec = make_spec([0.5, -2.0], [0, 0], [1, 1])
        assert oracle.kkt_residual(spec, [0.5, 0.5], [], []) == 2.0

    def test_complementarity(self):
        spec = make_spec([0], [0], [1], A_G=[[1]], b_G=[-1])
        x, mu = np.array([0.5]), np.array([0.3])
        r = oracle.kkt_residual(spec, x, mu, [])
        assert r >= abs(mu @ spec.G(x)) > 0

    def test_optimal_certificate(self):
        spec = generate_instance(11, 8, 10, 3)
        cert = oracle.solve_reference(spec)
        assert oracle.kkt_residual(spec, cert.x_star, cert.mu, cert.nu) <= 1e-7

    def test_normal_cone_at_bounds(self):
        # min x on [0,1]: at x=0 the cost is absorbed by the lower-bound cone
        spec = make_spec([1], [0], [1])
        assert oracle.kkt_residual(spec, [0.0], [], []) == 0.0
        assert oracle.kkt_residual(spec, [1.0], [], []) == 1.0


class TestNumericMinimize:
    @pytest.mark.parametrize("f,a,b,want", [
        (lambda x: (x - 2) ** 2, 0, 10, 2.0),
        (lambda x: (x - 2) ** 2, 0, 1, 1.0),
        (lambda x: x + x * x / 2 + (x - 1) ** 2 / 2, 0, 1, 0.0),
    ])
    def test_examples(self, f, a, b, want):
        assert oracle.numeric_minimize(f, a, b) == pytest.approx(want, abs=1e-8)


def test_box_qp_bruteforce_matches_kkt():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m = int(rng.integers(1, 5))
        B = rng.normal(size=(m, m))
        Q = B @ B.T + 0.1 * np.eye(m)
        q = rng.normal(size=m) * 3
        lo, hi = -rng.uniform(size=m), rng.uniform(size=m)
        x, val = oracle.box_qp_bruteforce(Q, q, lo, hi)
        g = Q @ x + q
        free = (x > lo) & (x < hi)
        assert np.all(np.abs(g[free]) < 1e-9)
        assert np.all(g[x == lo] >= -1e-9) and np.all(g[x == hi] <= 1e-9)
        assert val == pytest.approx(0.5 * x @ Q @ x + q @ x)
