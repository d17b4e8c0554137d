import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import cpu12, random_quadratic
from nlalloc import nonlinearity as nl
from nlalloc.analysis import analyze, residual, solve_oracle
from nlalloc.objective import AgentCost, Barrier, Box, ProblemSpec, Quadratic, QuadraticCpuCost
from nlalloc.protocol import (
    ConfigurationError,
    NumericalAbort,
    ProtocolConfig,
    initial_state,
    max_step_size,
    rate_bound,
    run,
    step_dt_link,
    step_dt_node,
    transfer_grid,
)
from nlalloc.topology import GraphSchedule, TopologyError, cycle, from_edges, laplacian, path, spectrum

TWO = ProblemSpec([AgentCost(QuadraticCpuCost(2.0, 10.0, 0.0)), AgentCost(QuadraticCpuCost(2.0, 30.0, 0.0))], 20.0)


def rotation_cycle(n, w=1.5):
    return from_edges(n, [(i, (i + 1) % n, w) for i in range(n)], directed=True)


class TestStepNode:
    def test_equal_gradients_fixed_point(self):
        spec = ProblemSpec([AgentCost(Quadratic(2.0, 10.0))] * 2, 10.0)
        assert step_dt_node([5.0, 5.0], path(2), spec, nl.identity(), 0.1).tolist() == [5.0, 5.0]

    def test_hand_computed_step(self):
        x = step_dt_node([10.0, 10.0], path(2), TWO, nl.identity(), 0.1)
        assert x.tolist() == [8.0, 12.0]

    def test_dead_zone_stalls(self):
        x = step_dt_node([10.0, 10.0], path(2), TWO, nl.uniform_quantizer(50.0), 0.1)
        assert x.tolist() == [10.0, 10.0]

    def test_directed_graph_rejected(self):
        spec = ProblemSpec([AgentCost(Quadratic(1.0, float(i))) for i in range(3)], 3.0)
        with pytest.raises(ConfigurationError, match="undirected"):
            step_dt_node([1.0, 1.0, 1.0], rotation_cycle(3), spec, nl.identity(), 0.1)


class TestStepLink:
    def test_identity_matches_node(self, cpu_spec):
        x = np.full(12, cpu_spec.b / 12)
        a = step_dt_node(x, cycle(12), cpu_spec, nl.identity(), 0.01)
        b = step_dt_link(x, cycle(12), cpu_spec, nl.identity(), 0.01)
        assert np.array_equal(a, b)

    def test_balanced_directed_cycle_preserves_sum(self):
        spec = ProblemSpec([AgentCost(Quadratic(1.0 + i, 5.0 * i)) for i in range(3)], 6.0)
        x = np.array([1.0, 2.0, 3.0])
        nxt = step_dt_link(x, rotation_cycle(3), spec, nl.identity(), 0.05)
        assert abs(math.fsum(nxt) - 6.0) <= 1e-12
        assert not np.array_equal(nxt, x)

    def test_directed_follows_row_convention(self):
        # agent i reads from j with weight W[i, j]
        spec = ProblemSpec([AgentCost(Quadratic(1.0, 0.0))] * 3, 6.0)
        x = np.array([1.0, 2.0, 3.0])
        g = rotation_cycle(3, 1.0)
        nxt = step_dt_link(x, g, spec, nl.identity(), 0.1)
        expected = x + 0.1 * (np.roll(x, -1) - x)
        assert np.allclose(nxt, expected, rtol=0, atol=1e-15)

    def test_log_quantizer_equal_gradients(self):
        spec = ProblemSpec([AgentCost(Quadratic(2.0, 6.0))] * 3, 9.0)
        x = np.array([3.0, 3.0, 3.0])
        assert step_dt_link(x, cycle(3), spec, nl.log_quantizer(1.0), 0.1).tolist() == x.tolist()

    def test_unbalanced_rejected(self):
        spec = ProblemSpec([AgentCost(Quadratic(1.0, 0.0))] * 3, 3.0)
        g = from_edges(3, [(0, 1, 1.0), (1, 2, 1.0)], directed=True)
        with pytest.raises(ConfigurationError, match="weight-balanced"):
            step_dt_link([1.0, 1.0, 1.0], g, spec, nl.identity(), 0.1)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(variant="dt_nodes", eta=0.1, steps=1),
                                        dict(variant="dt_node", eta=0.0, steps=1),
                                        dict(variant="dt_node", eta=0.1, steps=-1),
                                        dict(variant="ct_node", eta=0.1, steps=1, dt=0.0),
                                        dict(variant="dt_node", eta=0.1, steps=1, init="random")])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            ProtocolConfig(**kwargs)

    def test_continuous_step(self):
        cfg = ProtocolConfig("ct_link", 2.0, 10, dt=0.01)
        assert cfg.step_size == 0.02 and cfg.link and cfg.continuous


class TestInitialState:
    @given(st.integers(1, 40), st.floats(-1e6, 1e6), st.sampled_from(["equal", "weighted"]))
    def test_sum_is_exact(self, n, b, init):
        spec = ProblemSpec([AgentCost(Quadratic(1.0, 0.0))] * n, b)
        x = initial_state(ProtocolConfig("dt_node", 0.1, 1, init=init), spec)
        assert math.fsum(x) == b

    def test_weighted_split(self):
        spec = ProblemSpec([AgentCost(Quadratic(1.0, 0.0))] * 3, 12.0, weights=(1.0, 2.0, 3.0))
        x = initial_state(ProtocolConfig("dt_node", 0.1, 1, init="weighted"), spec)
        assert np.allclose(x, [2.0, 4.0, 6.0])

    def test_custom_vector_checked(self):
        spec = ProblemSpec([AgentCost(Quadratic(1.0, 0.0))] * 3, 3.0)
        with pytest.raises(ConfigurationError, match="infeasible"):
            initial_state(ProtocolConfig("dt_node", 0.1, 1, init=(1.0, 1.0, 2.0)), spec)
        x = initial_state(ProtocolConfig("dt_node", 0.1, 1, init=(0.5, 0.5, 2.0)), spec)
        assert math.fsum(x) == 3.0

    def test_barrier_start_must_be_interior(self):
        spec = ProblemSpec([AgentCost(Quadratic(1.0, 0.0), Barrier("log", 1.0), Box(0.0, 1.0))] * 2, 1.5)
        with pytest.raises(ConfigurationError, match="barrier"):
            initial_state(ProtocolConfig("dt_node", 0.1, 1, init=(0.5, 1.0)), spec)

    def test_grid_is_power_of_two(self):
        g = transfer_grid(np.array([3.0, 4.0]), 7.0)
        assert math.frexp(g)[0] == 0.5


class TestRun:
    def test_zero_steps(self, cpu_spec):
        tr = run(ProtocolConfig("dt_node", 0.01, 0), cpu_spec, cycle(12))
        assert tr.states.shape == (1, 12)
        assert math.fsum(tr.states[0]) == cpu_spec.b

    def test_row_zero_is_initializer(self, cpu_spec):
        cfg = ProtocolConfig("dt_node", 0.01, 5)
        tr = run(cfg, cpu_spec, cycle(12))
        assert np.array_equal(tr.states[0], initial_state(cfg, cpu_spec))
        assert tr.step_sizes.tolist() == [0.01] * 5 and tr.frame_index.tolist() == [0] * 5

    def test_identity_converges_monotonically(self, cpu_spec):
        xs = solve_oracle(cpu_spec)
        sp = spectrum(laplacian(cycle(12)))
        eta = 0.9 * max_step_size(sp, 1.0, 1.0, 1.0)
        tr = run(ProtocolConfig("dt_node", eta, 20000), cpu_spec, cycle(12))
        fb = residual(cpu_spec, tr.states, xs)
        assert np.all(np.diff(fb) <= 1e-12)
        assert fb[-1] < 1e-8

    def test_ten_times_bound_is_flagged(self, cpu_spec):
        sp = spectrum(laplacian(cycle(12)))
        eta = 10 * max_step_size(sp, 1.0, 1.0, 1.0)
        try:
            tr = run(ProtocolConfig("dt_node", eta, 2000), cpu_spec, cycle(12))
        except NumericalAbort as exc:
            assert exc.trajectory is not None and exc.step <= 2000
            return
        rep = analyze(cpu_spec, tr, cycle(12))
        assert rep.certificate("step_size").status == "violated"

    def test_divergence_guard(self):
        spec = random_quadratic(np.random.Generator(np.random.PCG64(5)), 6)
        with pytest.raises(NumericalAbort) as info:
            run(ProtocolConfig("dt_node", 5.0, 10000), spec, cycle(6))
        assert np.all(np.abs(info.value.trajectory.states[-2]) <= 1e12)

    def test_continuous_time_is_scaled_euler(self, cpu_spec):
        ct = run(ProtocolConfig("ct_node", 1.0, 50, dt=0.01), cpu_spec, cycle(12))
        dt = run(ProtocolConfig("dt_node", 0.01, 50), cpu_spec, cycle(12))
        assert np.array_equal(ct.states, dt.states)
        assert ct.times[-1] == pytest.approx(0.5)

    def test_schedule_hold_and_cycle_frames(self, cpu_spec):
        even = from_edges(12, [(i, i + 1) for i in range(0, 12, 2)])
        odd = from_edges(12, [(i, (i + 1) % 12) for i in range(1, 12, 2)])
        tr = run(ProtocolConfig("dt_node", 0.05, 7), cpu_spec, GraphSchedule(((even, 2), (odd, 1))))
        assert tr.frame_index.tolist() == [0, 0, 1, 0, 0, 1, 0]

    def test_size_mismatch(self, cpu_spec):
        with pytest.raises(ConfigurationError):
            run(ProtocolConfig("dt_node", 0.1, 1), cpu_spec, cycle(5))

    def test_barrier_run_stays_interior(self):
        costs = [AgentCost(Quadratic(1.0, 10.0 * i), Barrier("log", 0.5), Box(0.0, 3.0)) for i in range(4)]
        spec = ProblemSpec(costs, 6.0)
        tr = run(ProtocolConfig("dt_node", 5e-4, 20000), spec, cycle(4))
        assert np.all((tr.states > 0.0) & (tr.states < 3.0))
        assert np.max(np.abs(tr.sums() - 6.0)) == 0.0
        xs = solve_oracle(spec)
        assert np.max(np.abs(tr.final - xs)) < 1e-6

    @pytest.mark.parametrize("h", [nl.identity(), nl.saturation(5.0), nl.log_quantizer(0.5),
                                   nl.uniform_quantizer(0.25), nl.signpower_sum(0.5, 1.3)], ids=lambda h: h.kind)
    def test_node_sum_exact_for_every_map(self, cpu_spec, h):
        tr = run(ProtocolConfig("dt_node", 0.005, 3000, h), cpu_spec, cycle(12))
        assert np.all(tr.sums() == cpu_spec.b)


class TestBounds:
    def test_two_node_identity(self):
        sp = spectrum(laplacian(path(2)))
        assert max_step_size(sp, 1.0, 1.0, 1.0) == pytest.approx(1.0, rel=1e-15)

    def test_uniform_quantizer_unavailable(self):
        sp = spectrum(laplacian(path(2)))
        assert max_step_size(sp, 1.0, *(nl.uniform_quantizer(1.0).sector_bounds() or (None, None))) is None

    def test_log_quantizer_cycle12_frozen(self):
        sp = spectrum(laplacian(cycle(12)))
        lo, hi = nl.log_quantizer(1.0).sector_bounds()
        assert max_step_size(sp, 1.0, lo, hi) == pytest.approx(0.012321624896737575, rel=1e-12)

    def test_identity_cycle12_frozen(self):
        sp = spectrum(laplacian(cycle(12)))
        assert max_step_size(sp, 1.0, 1.0, 1.0) == pytest.approx(0.0334936490538903, rel=1e-12)

    def test_disconnected_refused(self):
        sp = spectrum(laplacian(from_edges(4, [(0, 1), (2, 3)])))
        with pytest.raises(TopologyError):
            max_step_size(sp, 1.0, 1.0, 1.0)

    def test_rate_at_bound(self):
        sp = spectrum(laplacian(cycle(12)))
        eta = max_step_size(sp, 1.0, 1.0, 1.0)
        # at the limit the quadratic term cancels the linear one
        assert rate_bound(sp, 1.0, 1.0, 1.0, 1.0, eta) == pytest.approx(1.0, abs=1e-15)
        half = rate_bound(sp, 1.0, 1.0, 1.0, 1.0, eta / 2)
        assert half == pytest.approx(1.0 - eta / 2 * sp.lambda2 / 2, rel=1e-12)
