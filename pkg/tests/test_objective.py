import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from nlalloc.analysis import solve_oracle
from nlalloc.objective import (
    AgentCost,
    Barrier,
    BarrierDomainError,
    Box,
    DegenerateWeightError,
    InfeasibleProblemError,
    ParameterError,
    Penalty,
    Polynomial,
    ProblemSpec,
    Quadratic,
    QuadraticCpuCost,
    Quartic,
    barrier,
    curvature_bounds,
    kkt_residual,
    penalty_max,
    penalty_power,
    penalty_softplus,
    reweight,
)


def central_diff(fn, x, h):
    return (fn(x + h) - fn(x - h)) / (2.0 * h)


class TestEval:
    def test_cpu_cost_at_minimum(self):
        cost = AgentCost(QuadraticCpuCost(2.0, 25.0, 15.0))
        assert cost.eval(20.0) == (0.0, 0.0, 2.0)

    def test_quartic(self):
        assert AgentCost(Quartic(1.0, 0.0)).eval(2.0) == (16.0, 32.0, 48.0)

    def test_cpu_cost_with_power_penalty(self):
        cost = AgentCost(QuadraticCpuCost(2.0, 40.0, 0.0), Penalty("power", 1.0, 2), Box(0.0, 10.0))
        v, g, c = cost.eval(12.0)
        assert v == pytest.approx(68.0, abs=1e-12)
        assert g == pytest.approx(-12.0, abs=1e-12)
        assert c == pytest.approx(4.0, abs=1e-12)
        fd = central_diff(cost.value, 12.0, 1e-6)
        assert fd == pytest.approx(g, rel=1e-7)

    def test_barrier_outside_names_constraint(self):
        cost = AgentCost(Quadratic(1.0, 0.0), Barrier("log", 1.0), Box(0.0, 1.0))
        with pytest.raises(BarrierDomainError, match="upper"):
            cost.eval(1.0)
        with pytest.raises(BarrierDomainError, match="lower"):
            cost.eval(-0.5)

    def test_augmentation_needs_box(self):
        with pytest.raises(ParameterError):
            AgentCost(Quadratic(1.0, 0.0), Penalty("power", 1.0, 2))

    def test_max_penalty_warns(self):
        with pytest.warns(UserWarning, match="subgradient"):
            AgentCost(Quadratic(1.0, 0.0), Penalty("max", 1.0), Box(0.0, 1.0))


class TestPenalties:
    def test_max_inside(self):
        assert penalty_max(0.5, 0.0, 1.0, 3.0) == 0.0

    def test_max_above(self):
        assert penalty_max(4.0, 0.0, 1.0, 2.0) == 6.0

    def test_max_below(self):
        assert penalty_max(-1.5, 0.0, 1.0, 4.0) == 6.0

    def test_softplus_symmetric_point(self):
        assert penalty_softplus(0.0, 1.0) == pytest.approx(math.log(2.0), rel=1e-15)

    def test_softplus_asymptotic_branch(self):
        ref = float(mpmath.log(1 + mpmath.exp(100)))
        assert penalty_softplus(100.0, 1.0) == ref == 100.0

    @pytest.mark.parametrize("z", [-40.0, -3.0, 0.25, 7.5, 29.9, 30.1, 45.0])
    @pytest.mark.parametrize("mu", [0.5, 1.0, 10.0])
    def test_softplus_matches_high_precision(self, z, mu):
        mpmath.mp.dps = 40
        ref = float(mpmath.log1p(mpmath.exp(mpmath.mpf(mu) * z)) / mu)
        assert penalty_softplus(z, mu) == pytest.approx(ref, rel=1e-14, abs=1e-300)

    @pytest.mark.parametrize("mu", [0.5, 1.0, 10.0])
    def test_softplus_gap(self, mu):
        z = np.linspace(-50.0, 50.0, 20001)
        gap = np.array([penalty_softplus(t, mu) for t in z]) - np.maximum(z, 0.0)
        assert gap.min() >= 0.0
        assert gap.max() <= 1.0 / mu

    def test_power(self):
        assert penalty_power(-5.0, 3) == 0.0
        assert penalty_power(2.0, 2) == 4.0

    def test_power_rejects_low_exponent(self):
        with pytest.raises(ParameterError):
            penalty_power(1.0, 1)

    def test_power_derivative_continuous_at_zero(self):
        h = 1e-6
        left = (penalty_power(0.0, 2) - penalty_power(-h, 2)) / h
        right = (penalty_power(h, 2) - penalty_power(0.0, 2)) / h
        assert abs(left) <= 1e-5 and abs(right) <= 1e-5


class TestBarrier:
    def test_log(self):
        assert barrier("log", -1.0) == 0.0

    def test_inverse(self):
        assert barrier("inverse", -0.5) == 2.0

    @pytest.mark.parametrize("kind", ["log", "inverse"])
    def test_blow_up(self, kind):
        assert barrier(kind, -1e-8) > barrier(kind, -1e-4)
        vals = [barrier(kind, -g) for g in np.geomspace(1.0, 1e-12, 50)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("g", [0.0, 0.5])
    def test_domain(self, g):
        with pytest.raises(BarrierDomainError):
            barrier("log", g)


COST_KINDS = [
    AgentCost(Quadratic(1.7, 3.0)),
    AgentCost(Quartic(0.6, 1.2)),
    AgentCost(Polynomial((1.0, -2.0, 0.5, 0.0, 0.1))),
    AgentCost(Quadratic(2.0, 10.0), Penalty("power", 1.5, 2), Box(-1.0, 2.0)),
    AgentCost(Quadratic(2.0, 10.0), Penalty("power", 1.0, 3), Box(-1.0, 2.0)),
    AgentCost(Quartic(0.4, -1.0), Penalty("softplus", 1.0, 1.0), Box(-2.0, 5.0)),
    AgentCost(Quartic(0.4, -1.0), Penalty("softplus", 2.0, 10.0), Box(-2.0, 5.0)),
    AgentCost(Quadratic(1.0, 0.5), Barrier("log", 0.3), Box(-1.0, 3.0)),
    AgentCost(Quadratic(1.0, 0.5), Barrier("inverse", 0.3), Box(-1.0, 3.0)),
    AgentCost(Quadratic(1.0, 0.5), Penalty("power", 1.0, 2), Box(-1.0, 3.0), scale=-2.5),
]


@pytest.mark.parametrize("cost", COST_KINDS, ids=lambda c: type(c.base).__name__ + "/" + type(c.augmentation).__name__)
def test_gradient_and_curvature_consistency(cost):
    rng = np.random.Generator(np.random.PCG64(11))
    box = cost.domain_box
    if cost.has_barrier:
        width = box.upper - box.lower
        x = rng.uniform(box.lower + 0.05 * width, box.upper - 0.05 * width, 1000)
    else:
        x = rng.uniform(-6.0, 6.0, 1000)
    hstep = 1e-5 * (1.0 + np.abs(x))
    g = cost.grad(x)
    fd = central_diff(cost.value, x, hstep)
    assert np.all(np.abs(g - fd) <= 1e-6 * (1.0 + np.abs(g)))
    c = cost.curv(x)
    fd2 = central_diff(cost.grad, x, hstep)
    assert np.all(np.abs(c - fd2) <= 1e-5 * (1.0 + np.abs(c)))
    assert np.all(c >= 0.0)


class TestProblemSpec:
    def test_infeasible_box(self):
        costs = [AgentCost(Quadratic(1.0, 0.0), Penalty("power", 1.0, 2), Box(0.0, 1.0))] * 3
        with pytest.raises(InfeasibleProblemError):
            ProblemSpec(costs, 4.0)

    def test_zero_weight(self):
        with pytest.raises(DegenerateWeightError):
            ProblemSpec([AgentCost(Quadratic(1.0, 0.0))] * 2, 1.0, weights=(1.0, 0.0))


class TestReweight:
    def test_unit_weights_identity(self):
        spec = ProblemSpec([AgentCost(Quadratic(2.0, 1.0)), AgentCost(Quadratic(1.0, 3.0))], 5.0, weights=(1.0, 1.0))
        work = reweight(spec)
        x = np.array([1.3, -0.4])
        assert np.array_equal(work.gradient(x), spec.gradient(x))
        assert work.weights is None

    def test_positive_scaling_maps_box_and_optimum(self):
        costs = [AgentCost(Quadratic(2.0, 4.0), Penalty("power", 1.0, 2), Box(0.0, 5.0)),
                 AgentCost(Quadratic(1.0, 1.0), Penalty("power", 1.0, 2), Box(0.0, 5.0))]
        spec = ProblemSpec(costs, 7.0, weights=(2.0, 1.0))
        work = reweight(spec)
        lo, hi = work.domain_bounds()
        assert lo[0] == 0.0 and hi[0] == 10.0
        y_star = solve_oracle(spec)
        x_star = solve_oracle(work)
        assert np.allclose(x_star, np.array([2.0, 1.0]) * y_star, atol=1e-10)
        assert spec.constraint_sum(y_star) == pytest.approx(7.0, abs=1e-10)

    def test_negative_weight_swaps_box(self):
        spec = ProblemSpec([AgentCost(Quadratic(1.0, 0.0), Penalty("power", 1.0, 2), Box(1.0, 4.0)),
                            AgentCost(Quadratic(1.0, 0.0))], 0.0, weights=(-1.0, 1.0))
        lo, hi = reweight(spec).domain_bounds()
        assert (lo[0], hi[0]) == (-4.0, -1.0)


class TestKKT:
    def test_closed_form_optimum(self):
        spec = ProblemSpec([AgentCost(QuadraticCpuCost(2.0, 10.0, 0.0)), AgentCost(QuadraticCpuCost(2.0, 30.0, 0.0))], 20.0)
        assert kkt_residual(spec, [5.0, 15.0]) <= 1e-10

    def test_equal_split_heterogeneous(self, cpu_spec):
        assert kkt_residual(cpu_spec, np.full(12, cpu_spec.b / 12)) > 1.0

    def test_single_agent(self):
        spec = ProblemSpec([AgentCost(Quartic(1.0, 3.0))], 2.0)
        assert kkt_residual(spec, [2.0]) == 0.0

    def test_weighted_divides_by_weight(self):
        spec = ProblemSpec([AgentCost(Quadratic(1.0, 0.0))] * 2, 3.0, weights=(1.0, 2.0))
        # gradients (1, 2) are proportional to a = (1, 2): optimal
        assert kkt_residual(spec, [1.0, 2.0]) == 0.0


class TestCurvatureBounds:
    def test_cpu_box(self, cpu_spec):
        v, u, used = curvature_bounds(cpu_spec)
        assert np.all(v == 1.0) and np.all(u == 1.0)
        assert used[0] == (0.0, 100.0)

    def test_quartic_not_strongly_convex_alone(self):
        spec = ProblemSpec([AgentCost(Quartic(1.0, 0.0))] * 2, 0.0)
        v, u, _ = curvature_bounds(spec, intervals=[(-1.0, 1.0)] * 2)
        assert np.all(v == 0.0) and np.all(u == pytest.approx(6.0))

    def test_unboxed_needs_x_star(self):
        spec = ProblemSpec([AgentCost(Quadratic(1.0, 0.0))] * 2, 1.0)
        with pytest.raises(ParameterError):
            curvature_bounds(spec)
        v, u, used = curvature_bounds(spec, x_star=np.array([0.5, 0.5]))
        assert used[0] == (-0.5, 1.5)

    @given(st.floats(0.1, 5.0), st.floats(-3.0, 3.0), st.floats(0.1, 4.0))
    def test_bounds_bracket_sampled_curvature(self, omega, alpha, half):
        cost = AgentCost(Quartic(omega, alpha), Penalty("softplus", 1.0, 1.0), Box(-2.0, 5.0))
        spec = ProblemSpec([cost, cost], 2.0)
        v, u, _ = curvature_bounds(spec, intervals=[(alpha - half, alpha + half)] * 2, samples=2001)
        pts = np.linspace(alpha - half, alpha + half, 97)
        c = cost.curv(pts)
        # a grid bound can miss an interior extremum by O(spacing^2)
        assert np.all(c >= 2.0 * v[0] - 1e-5 * 2.0 * u[0]) and np.all(c <= 2.0 * u[0] * (1 + 1e-6) + 1e-12)
