import subprocess
import sys
import warnings

import numpy as np
import pytest

from conftest import cpu12, quartic12
from nlalloc import kernels
from nlalloc import nonlinearity as nl
from nlalloc.objective import AgentCost, Barrier, Box, Penalty, Polynomial, ProblemSpec, Quadratic
from nlalloc.protocol import NumericalAbort, ProtocolConfig, run
from nlalloc.topology import GraphSchedule, cycle, from_edges

compiled = kernels.compiled_run_kernel()
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled extension not built")

MAPS = [nl.identity(), nl.saturation(3.0), nl.log_quantizer(0.5), nl.uniform_quantizer(0.25),
        nl.signpower_sum(0.5, 1.3)]


def barrier_spec():
    costs = [AgentCost(Quadratic(1.0, 2.0 * i), Barrier("inverse" if i % 2 else "log", 0.3), Box(-1.0, 4.0))
             for i in range(6)]
    return ProblemSpec(costs, 6.0)


def poly_spec():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        costs = [AgentCost(Polynomial((0.0, 0.2 * i, 1.0, 0.0, 0.05)), Penalty("max", 2.0), Box(-1.0, 1.0))
                 for i in range(6)]
    return ProblemSpec(costs, 1.0)


def both(cfg, spec, net):
    a = run(cfg, spec, net, backend=kernels.python_run_kernel)
    b = run(cfg, spec, net, backend=compiled)
    return a, b


@needs_ext
@pytest.mark.parametrize("h", MAPS, ids=lambda h: h.kind)
@pytest.mark.parametrize("variant", ["dt_node", "dt_link"])
def test_cpu_quadratic(h, variant):
    a, b = both(ProtocolConfig(variant, 0.01, 2000, h), cpu12(), cycle(12))
    if h.kind in ("identity", "uniform_quantizer", "saturation"):
        # only +, *, rint and comparisons: same IEEE operations in the same order
        assert np.array_equal(a.states, b.states)
    else:
        np.testing.assert_allclose(a.states, b.states, rtol=1e-12, atol=1e-9)
    assert np.array_equal(a.sums(), b.sums())


@needs_ext
@pytest.mark.parametrize("make", [quartic12, barrier_spec, poly_spec], ids=["quartic", "barrier", "poly"])
@pytest.mark.parametrize("h", MAPS[:3], ids=lambda h: h.kind)
def test_other_costs(make, h):
    spec = make()
    a, b = both(ProtocolConfig("dt_node", 1e-3, 3000, h), spec, cycle(spec.n))
    np.testing.assert_allclose(a.states, b.states, rtol=1e-10, atol=1e-9)


@needs_ext
def test_directed_and_schedule():
    spec = barrier_spec()
    rot = from_edges(6, [(i, (i + 1) % 6, 1.0) for i in range(6)], directed=True)
    sched = GraphSchedule(((rot, 3), (cycle(6, 0.5), 2)))
    a, b = both(ProtocolConfig("dt_link", 5e-3, 1500, nl.saturation(2.0)), spec, sched)
    np.testing.assert_allclose(a.states, b.states, rtol=1e-10, atol=1e-10)
    assert np.array_equal(a.frame_index, b.frame_index)


@needs_ext
def test_abort_agrees():
    steps = []
    for backend in (kernels.python_run_kernel, compiled):
        with pytest.raises(NumericalAbort) as info:
            run(ProtocolConfig("dt_node", 3.0, 5000), cpu12(box=False), cycle(12), backend=backend)
        steps.append(info.value.step)
    assert steps[0] == steps[1]


def test_env_forces_fallback():
    code = "import nlalloc.kernels as k; print(k.BACKEND)"
    res = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={"NLALLOC_PURE_PYTHON": "1", "PATH": ""})
    assert res.stdout.strip() == "python"


@needs_ext
def test_default_is_compiled():
    assert kernels.BACKEND == "cython"
