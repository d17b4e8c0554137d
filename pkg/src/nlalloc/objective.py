"""Per-agent convex costs, box handling through penalties or barriers, and the
global sum-preserving problem.

Every cost is evaluated through :class:`CostTable`, a structure-of-arrays view
vectorised across agents. The same arrays feed the compiled kernel, so there is
a single definition of each gradient.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np

__all__ = [
    "ObjectiveError",
    "BarrierDomainError",
    "InfeasibleProblemError",
    "DegenerateWeightError",
    "ParameterError",
    "Box",
    "Quadratic",
    "QuadraticCpuCost",
    "Quartic",
    "Polynomial",
    "Penalty",
    "Barrier",
    "AgentCost",
    "ProblemSpec",
    "CostTable",
    "penalty_max",
    "penalty_softplus",
    "penalty_power",
    "barrier",
    "reweight",
    "kkt_residual",
    "curvature_bounds",
]

BASE_QUADRATIC, BASE_QUARTIC, BASE_POLYNOMIAL = 0, 1, 2
AUG_NONE, AUG_MAX, AUG_SOFTPLUS, AUG_POWER, AUG_LOG_BARRIER, AUG_INV_BARRIER = range(6)


class ObjectiveError(ValueError):
    pass


class ParameterError(ObjectiveError):
    pass


class BarrierDomainError(ObjectiveError):
    """A barrier-augmented cost was evaluated on or outside its boundary."""


class InfeasibleProblemError(ObjectiveError):
    pass


class DegenerateWeightError(ObjectiveError):
    pass


# -- scalar building blocks ---------------------------------------------------


def penalty_max(x: float, m: float, M: float, c: float) -> float:
    if m > M:
        raise ParameterError("penalty_max requires m <= M")
    if c <= 0:
        raise ParameterError("penalty weight c must be positive")
    return c * max(x - M, 0.0) + c * max(m - x, 0.0)


def _softplus(z, mu):
    t = mu * np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        small = np.log1p(np.exp(np.minimum(t, 30.0))) / mu
        large = z + np.log1p(np.exp(-np.maximum(t, 30.0))) / mu
    return np.where(t > 30.0, large, small)


def _sigmoid(t):
    with np.errstate(over="ignore"):
        e = np.exp(-np.abs(t))
    return np.where(t >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def penalty_softplus(z: float, mu: float) -> float:
    """Smooth surrogate ``log(1 + exp(mu z)) / mu`` of ``max(z, 0)``."""
    if mu <= 0:
        raise ParameterError("softplus sharpness mu must be positive")
    return float(_softplus(z, mu))


def penalty_power(z: float, kappa: int) -> float:
    if int(kappa) != kappa or kappa <= 1:
        raise ParameterError(f"power penalty exponent must be an integer > 1, got {kappa!r}")
    return max(z, 0.0) ** int(kappa)


def barrier(kind: str, g_value: float) -> float:
    """Logarithmic ``-log(-g)`` or inverse ``-1/g`` barrier of a constraint ``g < 0``."""
    if g_value >= 0:
        raise BarrierDomainError(f"barrier evaluated at g = {g_value!r} >= 0 (outside the strict interior)")
    if kind == "log":
        return -math.log(-g_value)
    if kind == "inverse":
        return -1.0 / g_value
    raise ParameterError(f"unknown barrier kind {kind!r}")


# -- cost descriptions --------------------------------------------------------


@dataclass(frozen=True)
class Box:
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self) -> None:
        if not self.lower <= self.upper:
            raise ParameterError(f"box lower {self.lower} exceeds upper {self.upper}")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.lower) and math.isfinite(self.upper)

    def contains(self, x: float, strict: bool = False) -> bool:
        if strict:
            return self.lower < x < self.upper
        return self.lower <= x <= self.upper


@dataclass(frozen=True)
class Quadratic:
    """``(pi*y - r)^2 / (2 pi)``, i.e. ``pi/2 (y - r/pi)^2``."""

    pi: float
    r: float

    def __post_init__(self) -> None:
        if not self.pi > 0:
            raise ParameterError("quadratic curvature pi must be positive")


def QuadraticCpuCost(pi: float, rho: float, u: float) -> Quadratic:
    """CPU cost of a server with capacity ``pi``, needed cycles ``rho`` and occupied cycles ``u``."""
    return Quadratic(pi=float(pi), r=float(rho) + float(u))


@dataclass(frozen=True)
class Quartic:
    """``omega (y - alpha)^4``."""

    omega: float
    alpha: float

    def __post_init__(self) -> None:
        if not self.omega >= 0:
            raise ParameterError("quartic weight omega must be nonnegative")


@dataclass(frozen=True)
class Polynomial:
    """Polynomial with ascending coefficients ``c0 + c1 y + c2 y^2 + ...``."""

    coeffs: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if not self.coeffs:
            raise ParameterError("polynomial needs at least one coefficient")


@dataclass(frozen=True)
class Penalty:
    """Exterior box penalty: ``kind`` is ``max``, ``softplus`` (``param`` = mu) or ``power`` (``param`` = kappa)."""

    kind: str = "power"
    c: float = 1.0
    param: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in ("max", "softplus", "power"):
            raise ParameterError(f"unknown penalty kind {self.kind!r}")
        if not self.c > 0:
            raise ParameterError("penalty weight c must be positive")
        if self.kind == "softplus" and not self.param > 0:
            raise ParameterError("softplus sharpness mu must be positive")
        if self.kind == "power" and (int(self.param) != self.param or self.param <= 1):
            raise ParameterError(f"power penalty exponent must be an integer > 1, got {self.param!r}")


@dataclass(frozen=True)
class Barrier:
    """Interior box barrier, ``kind`` is ``log`` or ``inverse``."""

    kind: str = "log"
    c: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("log", "inverse"):
            raise ParameterError(f"unknown barrier kind {self.kind!r}")
        if not self.c > 0:
            raise ParameterError("barrier weight c must be positive")


BaseCost = Quadratic | Quartic | Polynomial


@dataclass(frozen=True)
class AgentCost:
    """One agent's cost ``f(scale * x)`` with optional box augmentation.

    ``box`` is expressed in the cost's own variable ``y = scale * x``;
    :attr:`domain_box` gives it in ``x``.
    """

    base: BaseCost
    augmentation: Penalty | Barrier | None = None
    box: Box | None = None
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.augmentation is not None and self.box is None:
            raise ParameterError("an augmentation needs a box")
        if isinstance(self.augmentation, Barrier) and self.box is not None:
            if self.box.lower == self.box.upper:
                raise ParameterError("barrier box must have a nonempty interior")
        if self.scale == 0 or not math.isfinite(self.scale):
            raise DegenerateWeightError("cost input scale must be finite and nonzero")
        if isinstance(self.augmentation, Penalty) and self.augmentation.kind == "max":
            warnings.warn(
                "penalty 'max' is non-smooth; its subgradient at the kink is taken as 0",
                stacklevel=3,
            )

    @property
    def domain_box(self) -> Box | None:
        if self.box is None:
            return None
        a, b = self.box.lower / self.scale, self.box.upper / self.scale
        return Box(min(a, b), max(a, b))

    @property
    def has_barrier(self) -> bool:
        return isinstance(self.augmentation, Barrier)

    @cached_property
    def _table(self) -> "CostTable":
        return CostTable.from_costs([self])

    def value(self, x):
        return self._table.values(np.asarray(x, dtype=float)[..., None])[..., 0]

    def grad(self, x):
        return self._table.gradients(np.asarray(x, dtype=float)[..., None])[..., 0]

    def curv(self, x):
        return self._table.curvatures(np.asarray(x, dtype=float)[..., None])[..., 0]

    def eval(self, x: float) -> tuple[float, float, float]:
        """``(f(x), f'(x), f''(x))`` including augmentation."""
        return float(self.value(x)), float(self.grad(x)), float(self.curv(x))


# -- vectorised evaluation ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class CostTable:
    """Structure-of-arrays encoding of ``n`` agent costs.

    Arrays are indexed by agent; evaluation methods accept ``x`` of shape
    ``(..., n)``.
    """

    base_kind: np.ndarray
    base_p: np.ndarray
    poly: np.ndarray
    aug_kind: np.ndarray
    aug_c: np.ndarray
    aug_p: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    scale: np.ndarray

    @classmethod
    def from_costs(cls, costs: Sequence[AgentCost]) -> "CostTable":
        n = len(costs)
        deg = max([len(c.base.coeffs) for c in costs if isinstance(c.base, Polynomial)] + [1])
        base_kind = np.zeros(n, dtype=np.int32)
        base_p = np.zeros((n, 2))
        poly = np.zeros((n, deg))
        aug_kind = np.zeros(n, dtype=np.int32)
        aug_c = np.zeros(n)
        aug_p = np.zeros(n)
        lo = np.full(n, -np.inf)
        hi = np.full(n, np.inf)
        scale = np.ones(n)
        for i, cost in enumerate(costs):
            b = cost.base
            if isinstance(b, Quadratic):
                base_kind[i] = BASE_QUADRATIC
                base_p[i] = (b.pi, b.r)
            elif isinstance(b, Quartic):
                base_kind[i] = BASE_QUARTIC
                base_p[i] = (b.omega, b.alpha)
            elif isinstance(b, Polynomial):
                base_kind[i] = BASE_POLYNOMIAL
                poly[i, : len(b.coeffs)] = b.coeffs
            else:
                raise ParameterError(f"unsupported base cost {b!r}")
            a = cost.augmentation
            if a is not None:
                aug_c[i] = a.c
                if isinstance(a, Penalty):
                    aug_kind[i] = {"max": AUG_MAX, "softplus": AUG_SOFTPLUS, "power": AUG_POWER}[a.kind]
                    aug_p[i] = a.param
                else:
                    aug_kind[i] = AUG_LOG_BARRIER if a.kind == "log" else AUG_INV_BARRIER
            if cost.box is not None:
                lo[i], hi[i] = cost.box.lower, cost.box.upper
            scale[i] = cost.scale
        arrays = dict(
            base_kind=base_kind, base_p=base_p, poly=poly, aug_kind=aug_kind,
            aug_c=aug_c, aug_p=aug_p, lo=lo, hi=hi, scale=scale,
        )
        for arr in arrays.values():
            arr.setflags(write=False)
        return cls(**arrays)

    @property
    def n(self) -> int:
        return self.base_kind.shape[0]

    @property
    def has_barrier(self) -> np.ndarray:
        return (self.aug_kind == AUG_LOG_BARRIER) | (self.aug_kind == AUG_INV_BARRIER)

    def _native(self, x):
        return np.asarray(x, dtype=float) * self.scale

    def _check_barrier(self, y) -> None:
        bar = self.has_barrier
        if not bar.any():
            return
        outside = bar & ~((y > self.lo) & (y < self.hi))
        if np.any(outside):
            idx = np.argwhere(outside)[0]
            agent = int(idx[-1])
            yv = float(y[tuple(idx)])
            which = "upper (y - M)" if yv >= self.hi[agent] else "lower (m - y)"
            raise BarrierDomainError(
                f"agent {agent}: barrier constraint g_{agent} {which} violated at native value {yv!r} "
                f"(box [{self.lo[agent]}, {self.hi[agent]}])"
            )

    # base terms in native coordinates
    def _base(self, y, order: int):
        k = self.base_kind
        p0, p1 = self.base_p[:, 0], self.base_p[:, 1]
        quad = k == BASE_QUADRATIC
        quart = k == BASE_QUARTIC
        pi = np.where(quad, p0, 1.0)
        if order == 0:
            out = np.where(quad, (pi * y - p1) ** 2 / (2.0 * pi), 0.0)
        elif order == 1:
            out = np.where(quad, pi * y - p1, 0.0)
        else:
            out = np.where(quad, pi + 0.0 * y, 0.0)
        d = y - p1
        if order == 0:
            out = out + np.where(quart, p0 * d**4, 0.0)
        elif order == 1:
            out = out + np.where(quart, 4.0 * p0 * (d * d * d), 0.0)
        else:
            out = out + np.where(quart, 12.0 * p0 * d**2, 0.0)
        if np.any(k == BASE_POLYNOMIAL):
            out = out + np.where(k == BASE_POLYNOMIAL, _polyval_deriv(self.poly, y, order), 0.0)
        return out

    def _aug(self, y, order: int):
        k = self.aug_kind
        c = self.aug_c
        out = np.zeros(np.broadcast(y, c).shape)
        if not np.any(k):
            return out
        up = y - self.hi  # g for the upper side
        dn = self.lo - y  # g for the lower side
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            m = k == AUG_MAX
            if m.any():
                if order == 0:
                    t = np.maximum(up, 0.0) + np.maximum(dn, 0.0)
                elif order == 1:
                    t = (up > 0).astype(float) - (dn > 0).astype(float)
                else:
                    t = 0.0 * y
                out = out + np.where(m, c * t, 0.0)
            m = k == AUG_SOFTPLUS
            if m.any():
                mu = np.where(m, self.aug_p, 1.0)
                if order == 0:
                    t = _softplus(up, mu) + _softplus(dn, mu)
                elif order == 1:
                    t = _sigmoid(mu * up) - _sigmoid(mu * dn)
                else:
                    su, sd = _sigmoid(mu * up), _sigmoid(mu * dn)
                    t = mu * (su * (1.0 - su) + sd * (1.0 - sd))
                out = out + np.where(m, c * np.nan_to_num(t, nan=0.0), 0.0)
            m = k == AUG_POWER
            if m.any():
                kap = np.where(m, self.aug_p, 2.0)
                pu, pd = np.maximum(up, 0.0), np.maximum(dn, 0.0)
                if order == 0:
                    t = pu**kap + pd**kap
                elif order == 1:
                    t = kap * (pu ** (kap - 1.0) - pd ** (kap - 1.0))
                else:
                    cu = np.where(up > 0, np.where(up > 0, up, 1.0) ** (kap - 2.0), 0.0)
                    cd = np.where(dn > 0, np.where(dn > 0, dn, 1.0) ** (kap - 2.0), 0.0)
                    t = kap * (kap - 1.0) * (cu + cd)
                out = out + np.where(m, c * t, 0.0)
            m = (k == AUG_LOG_BARRIER) | (k == AUG_INV_BARRIER)
            if m.any():
                ru = np.where(np.isfinite(self.hi), -up, np.inf)  # M - y > 0
                rd = np.where(np.isfinite(self.lo), -dn, np.inf)  # y - m > 0
                log_kind = k == AUG_LOG_BARRIER
                if order == 0:
                    tl = np.where(np.isfinite(ru), -np.log(ru), 0.0) + np.where(np.isfinite(rd), -np.log(rd), 0.0)
                    ti = 1.0 / ru + 1.0 / rd
                elif order == 1:
                    tl = 1.0 / ru - 1.0 / rd
                    ti = 1.0 / ru**2 - 1.0 / rd**2
                else:
                    tl = 1.0 / ru**2 + 1.0 / rd**2
                    ti = 2.0 / ru**3 + 2.0 / rd**3
                out = out + np.where(m, c * np.where(log_kind, tl, ti), 0.0)
        return out

    def values(self, x):
        y = self._native(x)
        self._check_barrier(y)
        return self._base(y, 0) + self._aug(y, 0)

    def gradients(self, x):
        y = self._native(x)
        self._check_barrier(y)
        return self.scale * (self._base(y, 1) + self._aug(y, 1))

    def curvatures(self, x):
        y = self._native(x)
        self._check_barrier(y)
        return self.scale**2 * (self._base(y, 2) + self._aug(y, 2))

    def bregman(self, x1, x2):
        """Per-agent ``f(x1) - f(x2) - f'(x2)(x1 - x2)`` in a cancellation-free form where available."""
        y1, y2 = self._native(x1), self._native(x2)
        self._check_barrier(y1)
        self._check_barrier(y2)
        k = self.base_kind
        p0, p1 = self.base_p[:, 0], self.base_p[:, 1]
        dy = y1 - y2
        a, b = y1 - p1, y2 - p1
        out = np.where(k == BASE_QUADRATIC, 0.5 * p0 * dy**2, 0.0)
        out = out + np.where(k == BASE_QUARTIC, p0 * dy**2 * (a * a + 2.0 * a * b + 3.0 * b * b), 0.0)
        if np.any(k == BASE_POLYNOMIAL):
            direct = _polyval_deriv(self.poly, y1, 0) - _polyval_deriv(self.poly, y2, 0) - _polyval_deriv(self.poly, y2, 1) * dy
            out = out + np.where(k == BASE_POLYNOMIAL, direct, 0.0)
        if np.any(self.aug_kind):
            out = out + (self._aug(y1, 0) - self._aug(y2, 0) - self._aug(y2, 1) * dy)
        return out


def _polyval_deriv(coeffs: np.ndarray, y, order: int):
    c = coeffs
    for _ in range(order):
        if c.shape[1] <= 1:
            return np.zeros(np.broadcast(y, c[:, 0]).shape)
        c = c[:, 1:] * np.arange(1, c.shape[1])
    acc = np.broadcast_to(c[:, -1], np.broadcast(y, c[:, -1]).shape).astype(float)
    for j in range(c.shape[1] - 2, -1, -1):
        acc = acc * y + c[:, j]
    return acc


# -- the global problem -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """``min sum_i f_i(x_i)`` subject to ``sum_i a_i x_i = b``.

    ``weights`` is ``None`` for the plain sum constraint.
    """

    costs: tuple[AgentCost, ...]
    b: float
    weights: tuple[float, ...] | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "costs", tuple(self.costs))
        object.__setattr__(self, "b", float(self.b))
        if not self.costs:
            raise ParameterError("problem needs at least one agent")
        if self.weights is not None:
            w = tuple(float(a) for a in self.weights)
            if len(w) != len(self.costs):
                raise ParameterError("weights length must match the number of agents")
            if any(a == 0 for a in w):
                raise DegenerateWeightError("weighted constraint requires every a_i != 0")
            object.__setattr__(self, "weights", w)
        lo, hi = self.feasible_range()
        if not lo <= self.b <= hi:
            raise InfeasibleProblemError(
                f"resource total b={self.b} outside the box-feasible range [{lo}, {hi}]"
            )

    @property
    def n(self) -> int:
        return len(self.costs)

    @property
    def weighted(self) -> bool:
        return self.weights is not None

    @cached_property
    def table(self) -> CostTable:
        return CostTable.from_costs(self.costs)

    def domain_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-agent bounds in the decision variable (``-inf``/``inf`` when unboxed)."""
        lo = np.full(self.n, -np.inf)
        hi = np.full(self.n, np.inf)
        for i, c in enumerate(self.costs):
            box = c.domain_box
            if box is not None:
                lo[i], hi[i] = box.lower, box.upper
        return lo, hi

    def feasible_range(self) -> tuple[float, float]:
        """Range of ``b`` compatible with the boxes (open for barriers, closed otherwise)."""
        lo, hi = self.domain_bounds()
        a = np.ones(self.n) if self.weights is None else np.asarray(self.weights)
        contrib_lo = np.where(a > 0, a * lo, a * hi)
        contrib_hi = np.where(a > 0, a * hi, a * lo)
        with np.errstate(invalid="ignore"):
            return float(np.sum(contrib_lo)), float(np.sum(contrib_hi))

    def value(self, x) -> float:
        return float(np.sum(self.table.values(x)))

    def gradient(self, x) -> np.ndarray:
        return self.table.gradients(x)

    def curvature(self, x) -> np.ndarray:
        return self.table.curvatures(x)

    def constraint_sum(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if self.weights is None:
            return math.fsum(x)
        return math.fsum(np.asarray(self.weights) * x)


def reweight(spec: ProblemSpec) -> ProblemSpec:
    """Change variables ``x_i = a_i y_i`` to get the equivalent unweighted problem in ``x``."""
    if spec.weights is None:
        return spec
    costs = tuple(replace(c, scale=c.scale / a) for c, a in zip(spec.costs, spec.weights))
    return ProblemSpec(costs=costs, b=spec.b, weights=None, meta=dict(spec.meta))


def kkt_residual(spec: ProblemSpec, x) -> float:
    """Spread ``max - min`` of the (weight-normalised) gradients; zero at the optimum."""
    g = spec.gradient(np.asarray(x, dtype=float))
    if spec.weights is not None:
        g = g / np.asarray(spec.weights)
    return float(np.max(g) - np.min(g))


def curvature_bounds(
    spec: ProblemSpec,
    intervals: Sequence[tuple[float, float]] | None = None,
    x_star: np.ndarray | None = None,
    samples: int = 10_000,
) -> tuple[np.ndarray, np.ndarray, list[tuple[float, float]]]:
    """Sampled ``(v_i, u_i)`` with ``2 v_i <= f_i'' <= 2 u_i`` on each agent's operating interval.

    The default interval is the agent's box (interior only, for barriers), or
    ``[x*_i - |b|, x*_i + |b|]`` when the agent is unboxed; the latter needs
    ``x_star``. Returns ``(v, u, intervals_used)``.
    """
    lo, hi = spec.domain_bounds()
    used: list[tuple[float, float]] = []
    for i in range(spec.n):
        if intervals is not None:
            a, b = intervals[i]
        elif np.isfinite(lo[i]) and np.isfinite(hi[i]):
            a, b = lo[i], hi[i]
        else:
            if x_star is None:
                raise ParameterError(f"agent {i} is unboxed; pass x_star or explicit intervals")
            r = max(abs(spec.b), 1.0)
            a = x_star[i] - r if not np.isfinite(lo[i]) else lo[i]
            b = x_star[i] + r if not np.isfinite(hi[i]) else hi[i]
        used.append((float(a), float(b)))
    extra = [_critical_points(c) for c in spec.costs]
    width = max(len(e) for e in extra)
    grid = np.empty((samples + width, spec.n))
    for i, (a, b) in enumerate(used):
        if spec.costs[i].has_barrier:
            pts = np.linspace(a, b, samples + 2)[1:-1]
        else:
            pts = np.linspace(a, b, samples)
        # where curvature can vanish or jump; pad with the interval midpoint
        crit = [p for p in extra[i] if a < p < b] if spec.costs[i].has_barrier else [p for p in extra[i] if a <= p <= b]
        crit += [0.5 * (a + b)] * (width - len(crit))
        grid[:samples, i] = pts
        grid[samples:, i] = crit
    curv = spec.curvature(grid)
    return curv.min(axis=0) / 2.0, curv.max(axis=0) / 2.0, used


def _critical_points(cost: AgentCost) -> list[float]:
    """Decision-variable points where ``f''`` has a zero or a jump: quartic centre, box edges."""
    pts = []
    if isinstance(cost.base, Quartic):
        pts.append(cost.base.alpha / cost.scale)
    if cost.domain_box is not None:
        pts += [cost.domain_box.lower, cost.domain_box.upper]
    return [p for p in pts if math.isfinite(p)]
