"""Scalar nonlinear maps applied to exchanged gradients or their differences."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NonlinearMap",
    "AssumptionReport",
    "identity",
    "saturation",
    "log_quantizer",
    "uniform_quantizer",
    "signpower_sum",
    "round_half_away",
    "apply",
    "verify_assumptions",
]

MAP_IDENTITY, MAP_SATURATION, MAP_LOG_QUANT, MAP_UNIFORM_QUANT, MAP_SIGNPOWER = range(5)

_KIND_CODES = {
    "identity": MAP_IDENTITY,
    "saturation": MAP_SATURATION,
    "log_quantizer": MAP_LOG_QUANT,
    "uniform_quantizer": MAP_UNIFORM_QUANT,
    "signpower_sum": MAP_SIGNPOWER,
}


def round_half_away(z):
    """Round to the nearest integer, ties away from zero (odd by construction)."""
    z = np.asarray(z, dtype=float)
    r = np.trunc(z)
    return r + np.copysign(1.0, z) * (np.abs(z - r) >= 0.5)


@dataclass(frozen=True)
class NonlinearMap:
    """A built-in odd map ``h``.

    ``p1``/``p2`` hold the kind's parameters: the level ``s`` for saturation,
    ``q`` for the quantizers, and ``(mu1, mu2)`` for ``signpower_sum``.
    """

    kind: str = "identity"
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown nonlinearity {self.kind!r}")
        if self.kind in ("saturation", "log_quantizer", "uniform_quantizer") and not self.p1 > 0:
            raise ValueError(f"{self.kind} level must be positive")
        if self.kind == "signpower_sum" and not (self.p1 > 0 and self.p2 > 0):
            raise ValueError("signpower exponents must be positive")

    @property
    def code(self) -> int:
        return _KIND_CODES[self.kind]

    @property
    def odd(self) -> bool:
        return True

    @property
    def level(self) -> float:
        return self.p1

    def sector_bounds(self, z_max: float | None = None) -> tuple[float, float] | None:
        """Analytic ``(alpha_lower, alpha_upper)`` with ``alpha_lower <= h(z)/z <= alpha_upper``.

        ``None`` means no finite positive sector exists. Saturation has a sector
        only on a bounded range ``|z| <= z_max``.
        """
        if self.kind == "identity":
            return (1.0, 1.0)
        if self.kind == "log_quantizer":
            q = self.p1
            return (math.exp(-q / 2.0), math.exp(q / 2.0))
        if self.kind == "saturation":
            if z_max is None or not math.isfinite(z_max):
                return None
            return (min(1.0, self.p1 / z_max) if z_max > 0 else 1.0, 1.0)
        if self.kind == "signpower_sum":
            mu1, mu2 = self.p1, self.p2
            if mu1 == 1.0 and mu2 == 1.0:
                return (2.0, 2.0)
            return None
        return None

    @property
    def lipschitz_at_origin(self) -> bool:
        return not (self.kind == "signpower_sum" and min(self.p1, self.p2) < 1.0)

    def __call__(self, z):
        return apply(self, z)


def identity() -> NonlinearMap:
    return NonlinearMap("identity")


def saturation(level: float) -> NonlinearMap:
    return NonlinearMap("saturation", float(level))


def log_quantizer(q: float) -> NonlinearMap:
    return NonlinearMap("log_quantizer", float(q))


def uniform_quantizer(q: float) -> NonlinearMap:
    return NonlinearMap("uniform_quantizer", float(q))


def signpower_sum(mu1: float, mu2: float) -> NonlinearMap:
    return NonlinearMap("signpower_sum", float(mu1), float(mu2))


def apply(h: NonlinearMap, z):
    """Evaluate ``h`` elementwise; returns a float for scalar input."""
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=float)
    k = h.kind
    if k == "identity":
        out = z.copy()
    elif k == "saturation":
        out = np.clip(z, -h.p1, h.p1)
    elif k == "uniform_quantizer":
        out = h.p1 * round_half_away(z / h.p1)
    elif k == "log_quantizer":
        a = np.abs(z)
        with np.errstate(divide="ignore"):
            expo = h.p1 * round_half_away(np.log(np.where(a > 0, a, 1.0)) / h.p1)
        out = np.where(a > 0, np.copysign(np.exp(expo), z), 0.0)
    else:
        a = np.abs(z)
        out = np.where(a > 0, np.copysign(a**h.p1 + a**h.p2, z), 0.0)
    return float(out) if scalar else out


@dataclass(frozen=True)
class AssumptionReport:
    kind: str
    samples: int
    sample_range: tuple[float, float]
    ratio_inf: float
    ratio_sup: float
    oddness_defect: float
    monotonicity_violations: int
    unbounded_near_origin: bool
    sector: bool
    odd: bool
    monotone: bool


def verify_assumptions(
    h: NonlinearMap,
    sample_range: tuple[float, float] = (1e-6, 1e3),
    count: int = 2000,
) -> AssumptionReport:
    """Sample ``h`` to measure its sector ratio, oddness defect and monotonicity.

    ``sample_range`` bounds ``|z|``; points are log-spaced there, mirrored to
    negative values, and merged with a uniform grid so that dead zones of
    quantizers are hit.
    """
    if count < 100:
        raise ValueError("count must be >= 100")
    lo, hi = float(sample_range[0]), float(sample_range[1])
    if lo < 0 or not hi > lo:
        raise ValueError("sample_range must satisfy 0 <= low < high")
    base = np.geomspace(max(lo, hi * 1e-12), hi, count)
    uni = np.linspace(lo, hi, count)
    mags = np.unique(np.concatenate([base, uni]))
    mags = mags[mags > 0]
    z = np.concatenate([-mags[::-1], mags])
    hz = apply(h, z)
    ratio = hz / z
    defect = float(np.max(np.abs(apply(h, mags) + apply(h, -mags))))
    violations = int(np.count_nonzero(np.diff(hz) < 0))
    rinf, rsup = float(np.min(ratio)), float(np.max(ratio))
    odd = defect == 0.0 and apply(h, 0.0) == 0.0
    # ratio still growing at the smallest sampled magnitudes: no finite upper sector
    small = mags[: max(2, mags.size // 20)]
    r_small = apply(h, small) / small
    unbounded = bool(np.max(r_small) > 4.0 * np.median(np.abs(ratio)))
    return AssumptionReport(
        kind=h.kind,
        samples=int(z.size),
        sample_range=(lo, hi),
        ratio_inf=rinf,
        ratio_sup=rsup,
        oddness_defect=defect,
        monotonicity_violations=violations,
        unbounded_near_origin=unbounded,
        sector=rinf > 0 and math.isfinite(rsup) and not unbounded,
        odd=odd,
        monotone=violations == 0,
    )
