import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nlalloc.objective import AgentCost, Box, Penalty, ProblemSpec, Quadratic, QuadraticCpuCost, Quartic

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def cpu12(seed: int = 1, box: bool = True) -> ProblemSpec:
    """Ring of 12 servers with pi = 2 and rho, occupied ~ U[0, 50], b = sum(rho + occupied)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    rho = rng.uniform(0.0, 50.0, 12)
    occ = rng.uniform(0.0, 50.0, 12)
    b = float(np.sum(np.concatenate([rho, occ])))
    aug = Penalty("power", 1.0, 2) if box else None
    bx = Box(0.0, 100.0) if box else None
    return ProblemSpec([AgentCost(QuadraticCpuCost(2.0, r, u), aug, bx) for r, u in zip(rho, occ)], b)


def quartic12(seed: int = 1, b: float = 20.0) -> ProblemSpec:
    rng = np.random.Generator(np.random.PCG64(seed))
    alpha = rng.uniform(-2.0, 4.0, 12)
    omega = rng.uniform(0.0, 1.0, 12)
    return ProblemSpec(
        [AgentCost(Quartic(w, a), Penalty("softplus", 1.0, 1.0), Box(-2.0, 5.0)) for a, w in zip(alpha, omega)],
        b,
    )


def random_quadratic(rng: np.random.Generator, n: int | None = None) -> ProblemSpec:
    n = int(rng.integers(2, 16)) if n is None else n
    pi = rng.uniform(0.5, 4.0, n)
    r = rng.uniform(-50.0, 50.0, n)
    return ProblemSpec([AgentCost(Quadratic(p, q)) for p, q in zip(pi, r)], float(rng.uniform(-100, 100)))


@pytest.fixture
def cpu_spec():
    return cpu12()


@pytest.fixture
def quartic_spec():
    return quartic12()


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line; printed immediately and again in the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
        return ok

    return record
