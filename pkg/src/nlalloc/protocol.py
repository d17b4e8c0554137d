"""The four gradient-Laplacian dynamics and the step-size bound that governs them.

On undirected frames both variants move an equal and opposite amount across
every edge. Agent ``i`` computes ``eta * W_ij * h(g_j - g_i)`` (node-based) or
``eta * W_ij * (h(g_j) - h(g_i))`` (link-based) from its neighbour's message,
and because ``h`` is odd agent ``j`` computes exactly the negation. Transfers
are snapped to a dyadic grid fine enough to be invisible to the dynamics but
coarse enough that every sum of states is exact, so ``sum(x)`` never drifts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .nonlinearity import NonlinearMap, identity
from .objective import BarrierDomainError, ProblemSpec, reweight
from .topology import GraphSchedule, LaplacianSpectrum, TopologyError, WeightedGraph

__all__ = [
    "VARIANTS",
    "ConfigurationError",
    "NumericalAbort",
    "ProtocolConfig",
    "Trajectory",
    "transfer_grid",
    "initial_state",
    "step_dt_node",
    "step_dt_link",
    "run",
    "max_step_size",
    "rate_bound",
]

VARIANTS = ("dt_node", "dt_link", "ct_node", "ct_link")

# bits of headroom above the initial state scale before sums stop being exact
_GRID_HEADROOM_BITS = 6


class ConfigurationError(ValueError):
    """Protocol, problem and network are incompatible."""


class NumericalAbort(RuntimeError):
    """States became non-finite or exceeded the divergence guard."""

    def __init__(self, step: int, trajectory: "Trajectory | None" = None):
        super().__init__(f"divergence guard tripped at step {step}; the step size is likely too large")
        self.step = step
        self.trajectory = trajectory


@dataclass(frozen=True)
class ProtocolConfig:
    """Dynamics to run.

    ``eta`` is the discrete step for ``dt_*`` variants and the continuous gain
    for ``ct_*`` variants, which are integrated by forward Euler with step
    ``dt`` (effective discrete step ``eta * dt``). ``init`` is ``"equal"``,
    ``"weighted"`` or an explicit feasible vector in the problem's own variable.
    """

    variant: str
    eta: float
    steps: int
    nonlinearity: NonlinearMap = field(default_factory=identity)
    dt: float = 1e-2
    init: str | tuple[float, ...] = "equal"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.eta > 0:
            raise ConfigurationError("step size must be positive")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ConfigurationError("steps must be a nonnegative integer")
        if self.continuous and not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not isinstance(self.init, str):
            object.__setattr__(self, "init", tuple(float(v) for v in self.init))
        elif self.init not in ("equal", "weighted"):
            raise ConfigurationError(f"unknown initializer {self.init!r}")

    @property
    def link(self) -> bool:
        return self.variant.endswith("_link")

    @property
    def continuous(self) -> bool:
        return self.variant.startswith("ct_")

    @property
    def step_size(self) -> float:
        """Effective discrete step ``eta_bar``."""
        return self.eta * self.dt if self.continuous else self.eta


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States ``x(0..K)`` in the unweighted variable, with per-step metadata."""

    states: np.ndarray
    frame_index: np.ndarray
    step_sizes: np.ndarray
    config: ProtocolConfig
    b: float
    grid: float
    dt: float | None = None

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        k = np.arange(self.states.shape[0], dtype=float)
        return k * self.dt if self.dt is not None else k

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def sums(self) -> np.ndarray:
        return np.array([math.fsum(row) for row in self.states])


def transfer_grid(x0: np.ndarray, b: float) -> float:
    """Power-of-two spacing for edge transfers.

    With every state a multiple of ``grid`` and magnitudes below
    ``2**53 * grid``, additions of states and transfers are exact.
    """
    scale = math.fsum(np.abs(x0)) + abs(b)
    if not scale > 0 or not math.isfinite(scale):
        scale = 1.0
    _, e = math.frexp(scale)
    # every double is a multiple of the smallest subnormal
    return math.ldexp(1.0, max(e + _GRID_HEADROOM_BITS - 53, -1074))


def _snap_feasible(x: np.ndarray, b: float, grid: float) -> np.ndarray:
    x = np.rint(np.asarray(x, dtype=float) / grid) * grid
    if x.size > 1:
        x[-1] = b - math.fsum(x[:-1])
    else:
        x[0] = b
    return x


def initial_state(config: ProtocolConfig, spec: ProblemSpec, grid: float | None = None) -> np.ndarray:
    """Feasible ``x(0)`` in the unweighted variable, bit-exact on ``sum(x) = b`` when ``b`` is on the grid."""
    n, b = spec.n, spec.b
    a = np.ones(n) if spec.weights is None else np.asarray(spec.weights)
    if isinstance(config.init, tuple):
        y = np.asarray(config.init, dtype=float)
        if y.shape != (n,):
            raise ConfigurationError(f"initial vector has length {y.size}, expected {n}")
        total = math.fsum(a * y)
        if abs(total - b) > 1e-9 * (1.0 + abs(b)):
            raise ConfigurationError(f"initial vector is infeasible: constraint sum {total} != b = {b}")
        x = a * y
    elif config.init == "weighted":
        sa = math.fsum(a)
        if sa == 0:
            raise ConfigurationError("weighted initializer needs sum(a) != 0")
        x = a * (b / sa)
    else:
        x = np.full(n, b / n)
    if grid is None:
        grid = transfer_grid(x, b)
    x = _snap_feasible(x, b, grid)
    work = reweight(spec)
    lo, hi = work.domain_bounds()
    for i, cost in enumerate(work.costs):
        if cost.has_barrier and not lo[i] < x[i] < hi[i]:
            raise ConfigurationError(
                f"agent {i}: initial value {x[i]} is not strictly inside its barrier box [{lo[i]}, {hi[i]}]"
            )
    return x


def _as_schedule(network: WeightedGraph | GraphSchedule) -> GraphSchedule:
    if isinstance(network, WeightedGraph):
        return GraphSchedule.static(network)
    return network


def _check_frames(schedule: GraphSchedule, link: bool) -> list[bool]:
    paired = []
    for idx, (g, _) in enumerate(schedule.frames):
        if g.is_undirected:
            paired.append(True)
            continue
        if not link:
            raise ConfigurationError(
                f"frame {idx} is directed: the node-based protocol keeps sum(x) = b only on "
                "undirected networks with symmetric weights"
            )
        if not g.is_weight_balanced:
            raise ConfigurationError(
                f"frame {idx} is not weight-balanced: the link-based protocol keeps sum(x) = b "
                "only on weight-balanced networks"
            )
        paired.append(False)
    return paired


def _encode_frames(schedule: GraphSchedule, paired: list[bool]):
    ei, ej, ew, ptr = [], [], [], [0]
    for (g, _), p in zip(schedule.frames, paired):
        edges = g.undirected_edges() if p else g.edges()
        for i, j, w in edges:
            ei.append(i)
            ej.append(j)
            ew.append(w)
        ptr.append(len(ei))
    return (
        np.asarray(ei, dtype=np.int64),
        np.asarray(ej, dtype=np.int64),
        np.asarray(ew, dtype=np.float64),
        np.asarray(ptr, dtype=np.int64),
        np.asarray(paired, dtype=np.uint8),
    )


def _execute(x0, spec: ProblemSpec, h: NonlinearMap, link: bool, eta: float, schedule: GraphSchedule,
             steps: int, grid: float, backend=None):
    table = spec.table
    paired = _check_frames(schedule, link)
    ei, ej, ew, ptr, fp = _encode_frames(schedule, paired)
    step_frame = schedule.frame_indices(steps)
    states = np.empty((steps + 1, spec.n))
    applied = np.zeros(steps)
    kernel = backend or kernels.run_kernel
    status, done = kernel(
        np.ascontiguousarray(x0, dtype=np.float64),
        table.base_kind, table.base_p, table.poly, table.aug_kind,
        table.aug_c, table.aug_p, table.lo, table.hi, table.scale,
        int(h.code), float(h.p1), float(h.p2),
        int(link), float(eta),
        ei, ej, ew, ptr, fp, step_frame, float(grid),
        states, applied,
    )
    return int(status), int(done), states, applied, step_frame


def _single_step(x, graph: WeightedGraph, spec: ProblemSpec, h: NonlinearMap, eta: float, link: bool) -> np.ndarray:
    work = reweight(spec)
    x = np.asarray(x, dtype=float)
    if x.shape != (work.n,):
        raise ConfigurationError("state length does not match the problem")
    grid = transfer_grid(x, work.b)
    status, _, states, _, _ = _execute(x, work, h, link, eta, GraphSchedule.static(graph), 1, grid)
    if status == 2:
        raise BarrierDomainError("state is outside a barrier box")
    return states[1].copy()


def step_dt_node(x, graph: WeightedGraph, spec: ProblemSpec, h: NonlinearMap, eta: float) -> np.ndarray:
    """One node-based step ``x_i += eta * sum_j W_ij h(g_j - g_i)``."""
    return _single_step(x, graph, spec, h, eta, link=False)


def step_dt_link(x, graph: WeightedGraph, spec: ProblemSpec, h: NonlinearMap, eta: float) -> np.ndarray:
    """One link-based step ``x_i += eta * sum_j W_ij (h(g_j) - h(g_i))``."""
    return _single_step(x, graph, spec, h, eta, link=True)


def run(
    config: ProtocolConfig,
    spec: ProblemSpec,
    network: WeightedGraph | GraphSchedule,
    *,
    backend=None,
) -> Trajectory:
    """Iterate the configured dynamics for ``config.steps`` steps from a feasible start.

    Weighted problems run in the unweighted variable ``x_i = a_i y_i``.
    Raises :class:`NumericalAbort` (carrying the partial trajectory) when the
    divergence guard trips.
    """
    schedule = _as_schedule(network)
    if schedule.n != spec.n:
        raise ConfigurationError(f"network has {schedule.n} agents, problem has {spec.n}")
    work = reweight(spec)
    x0 = initial_state(config, spec)
    grid = transfer_grid(x0, work.b)
    x0 = _snap_feasible(x0, work.b, grid)
    status, done, states, applied, frames = _execute(
        x0, work, config.nonlinearity, config.link, config.step_size, schedule, config.steps, grid, backend
    )
    traj = Trajectory(
        states=states[: done + 1] if status else states,
        frame_index=frames[:done] if status else frames,
        step_sizes=applied[:done] if status else applied,
        config=config,
        b=work.b,
        grid=grid,
        dt=config.dt if config.continuous else None,
    )
    if status == 1:
        raise NumericalAbort(done, traj)
    if status == 2:
        raise BarrierDomainError(f"a barrier agent left its box at step {done}")
    return traj


def max_step_size(
    spec: LaplacianSpectrum,
    u: float,
    alpha_lower: float | None,
    alpha_upper: float | None,
) -> float | None:
    """Largest certified step ``2 a_lo lambda2 / (u lambdaN^2 a_hi)``; ``None`` for non-sector maps."""
    if not u > 0:
        raise ValueError("curvature bound u must be positive")
    if not spec.usable:
        raise TopologyError("step-size bound needs a connected network spectrum")
    if alpha_lower is None or alpha_upper is None or not alpha_lower > 0 or not math.isfinite(alpha_upper):
        return None
    return 2.0 * alpha_lower * spec.lambda2 / (u * spec.lambdaN**2 * alpha_upper)


def rate_bound(
    spec: LaplacianSpectrum,
    u: float,
    v: float,
    alpha_lower: float,
    alpha_upper: float,
    eta: float,
) -> float:
    """Per-step contraction bound on the residual ratio ``F(k+1)/F(k)``."""
    lam2, lamn = spec.lambda2, spec.lambdaN
    return 1.0 - eta * v * (alpha_lower * lam2 - 0.5 * u * lamn**2 * alpha_upper * eta)
