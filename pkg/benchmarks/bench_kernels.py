"""Time the compiled and numpy protocol kernels on the bundled-size problems.

    python benchmarks/bench_kernels.py [--steps N] [--repeat R]
"""

import argparse
import sys
import time

import numpy as np

from nlalloc import kernels
from nlalloc import nonlinearity as nl
from nlalloc.objective import AgentCost, Box, Penalty, ProblemSpec, QuadraticCpuCost, Quartic
from nlalloc.protocol import ProtocolConfig, run
from nlalloc.topology import complete, cycle


def cpu(n, seed=1):
    rng = np.random.Generator(np.random.PCG64(seed))
    rho, occ = rng.uniform(0, 50, n), rng.uniform(0, 50, n)
    costs = [AgentCost(QuadraticCpuCost(2.0, r, u), Penalty("power", 1.0, 2), Box(0.0, 100.0)) for r, u in zip(rho, occ)]
    return ProblemSpec(costs, float(np.sum(rho) + np.sum(occ)))


def quartic(n, seed=1):
    rng = np.random.Generator(np.random.PCG64(seed))
    alpha, omega = rng.uniform(-2, 4, n), rng.uniform(0, 1, n)
    costs = [AgentCost(Quartic(w, a), Penalty("softplus", 1.0, 1.0), Box(-2.0, 5.0)) for a, w in zip(alpha, omega)]
    return ProblemSpec(costs, 20.0 * n / 12)


CASES = [
    ("cpu12 cycle, uniform q, link", lambda: cpu(12), cycle, ProtocolConfig("dt_link", 0.01, 0, nl.uniform_quantizer(0.125))),
    ("cpu12 cycle, log q, node", lambda: cpu(12), cycle, ProtocolConfig("dt_node", 0.01, 0, nl.log_quantizer(1.0))),
    ("quartic12 cycle, saturation", lambda: quartic(12), cycle, ProtocolConfig("dt_node", 1e-3, 0, nl.saturation(20.0))),
    ("quartic12 cycle, signpower", lambda: quartic(12), cycle, ProtocolConfig("dt_node", 1e-3, 0, nl.signpower_sum(0.5, 1.3))),
    ("cpu48 complete, identity", lambda: cpu(48), complete, ProtocolConfig("dt_node", 1e-3, 0)),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)
    compiled = kernels.compiled_run_kernel()
    if compiled is None:
        print("compiled extension not built; only the fallback can be timed", file=sys.stderr)
    print(f"{'case':34s} {'python':>10s} {'cython':>10s} {'speedup':>8s}  ({args.steps} steps, best of {args.repeat})")
    for label, make, graph, cfg in CASES:
        spec = make()
        g = graph(spec.n)
        cfg = ProtocolConfig(cfg.variant, cfg.eta, args.steps, cfg.nonlinearity)
        t_py = best_of(lambda: run(cfg, spec, g, backend=kernels.python_run_kernel), args.repeat)
        if compiled is None:
            print(f"{label:34s} {t_py:10.3f} {'-':>10s} {'-':>8s}")
            continue
        t_c = best_of(lambda: run(cfg, spec, g, backend=compiled), args.repeat)
        print(f"{label:34s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
