"""Centralized reference solutions, residual metrics and bound certificates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nonlinearity import NonlinearMap
from .objective import (
    InfeasibleProblemError,
    ObjectiveError,
    ProblemSpec,
    Quadratic,
    curvature_bounds,
    kkt_residual,
    reweight,
)
from .protocol import Trajectory, max_step_size, rate_bound
from .topology import GraphSchedule, WeightedGraph, laplacian, spectrum

__all__ = [
    "ConvexityError",
    "Certificate",
    "AnalysisReport",
    "solve_oracle",
    "quadratic_closed_form",
    "dispersion",
    "residual",
    "residual_series",
    "SandwichReport",
    "sandwich_check",
    "epsilon_certificate",
    "quantization_inverse_design",
    "rate_certificate",
    "window_certificate",
    "random_feasible_states",
    "analyze",
]

HOLDS, VIOLATED, NOT_APPLICABLE = "holds", "violated", "not-applicable"


class ConvexityError(ObjectiveError):
    """A gradient was found to decrease, so the cost is not convex."""


# -- oracle -------------------------------------------------------------------


def _box_centers(lo_dom: np.ndarray, hi_dom: np.ndarray) -> np.ndarray:
    """Box midpoint, the finite endpoint of a half-box, or 0 when unboxed."""
    flo, fhi = np.isfinite(lo_dom), np.isfinite(hi_dom)
    with np.errstate(invalid="ignore"):
        mid = 0.5 * (lo_dom + hi_dom)
    return np.where(flo & fhi, mid, np.where(flo, lo_dom, np.where(fhi, hi_dom, 0.0)))


# beyond this half-width a convex gradient would already have crossed any sane multiplier
_MAX_BRACKET = 1e60


def _inner_brackets(spec: ProblemSpec, lam: float):
    """Per-agent ``[lo, hi]`` with ``f'(lo) <= lam <= f'(hi)``, expanded geometrically."""
    lo_dom, hi_dom = spec.domain_bounds()
    n = spec.n
    bar = spec.table.has_barrier
    open_lo = bar & np.isfinite(lo_dom)
    open_hi = bar & np.isfinite(hi_dom)
    center = _box_centers(lo_dom, hi_dom)
    lo = np.where(open_lo, lo_dom, center - 1.0)
    hi = np.where(open_hi, hi_dom, center + 1.0)
    width = np.ones(n)
    while np.all(width <= _MAX_BRACKET):
        glo = _grad_open(spec, lo, open_lo, side=-1)
        bad = (glo > lam) & ~open_lo
        if not bad.any():
            break
        width = np.where(bad, width * 2.0, width)
        lo = np.where(bad, center - width, lo)
    else:
        raise ConvexityError("gradient never falls below the multiplier; cost may not be convex")
    width = np.ones(n)
    while np.all(width <= _MAX_BRACKET):
        ghi = _grad_open(spec, hi, open_hi, side=1)
        bad = (ghi < lam) & ~open_hi
        if not bad.any():
            break
        width = np.where(bad, width * 2.0, width)
        hi = np.where(bad, center + width, hi)
    else:
        raise ConvexityError("gradient never exceeds the multiplier; cost may not be convex")
    return lo, hi, open_lo, open_hi


def _grad_open(spec: ProblemSpec, x, open_mask, side: int):
    """Gradients with barrier endpoints treated as -inf / +inf."""
    if not open_mask.any():
        return spec.gradient(x)
    # barrier agents are evaluated at their box centre and then overwritten
    lo_dom, hi_dom = spec.domain_bounds()
    safe = np.where(open_mask, _box_centers(lo_dom, hi_dom), x)
    g = spec.gradient(safe)
    return np.where(open_mask, side * np.inf, g)


def _inverse_gradient(spec: ProblemSpec, lam: float) -> np.ndarray:
    lo, hi, _, _ = _inner_brackets(spec, lam)
    interior = 0.5 * (lo + hi)
    for _ in range(2200):
        mid = 0.5 * (lo + hi)
        active = (mid > lo) & (mid < hi)
        if not active.any():
            break
        # converged agents are parked at an interior point so barriers stay finite
        g = spec.gradient(np.where(active, mid, interior))
        go_up = g < lam
        lo = np.where(active & go_up, mid, lo)
        hi = np.where(active & ~go_up, mid, hi)
    return 0.5 * (lo + hi)


def _check_monotone(spec: ProblemSpec, lo: np.ndarray, hi: np.ndarray) -> None:
    lo_dom, hi_dom = spec.domain_bounds()
    bar = spec.table.has_barrier
    with np.errstate(invalid="ignore"):
        width = hi_dom - lo_dom
        a = np.where(bar, lo_dom + 1e-6 * width, lo)
        b = np.where(bar, hi_dom - 1e-6 * width, hi)
    t = np.linspace(0.0, 1.0, 257)[:, None]
    grid = a + t * (b - a)
    g = spec.gradient(grid)
    dg = np.diff(g, axis=0)
    tol = 1e-9 * (1.0 + np.max(np.abs(g), axis=0))
    bad = np.any(dg < -tol, axis=0)
    if bad.any():
        raise ConvexityError(f"gradient of agent {int(np.flatnonzero(bad)[0])} decreases: cost is not convex")


def solve_oracle(spec: ProblemSpec, tol: float | None = None) -> np.ndarray:
    """Centralized optimizer by bisection on the common gradient value.

    For each trial multiplier ``lam`` every agent's ``f_i'(x_i) = lam`` is
    solved by bisection (gradients are increasing), then ``lam`` is bisected
    until ``|sum_i x_i(lam) - b| <= tol``. Weighted problems are solved in the
    unweighted variable and mapped back to ``y_i = x_i / a_i``.
    """
    work = reweight(spec)
    b = work.b
    tol = 1e-12 * (1.0 + abs(b)) if tol is None else tol
    lo_dom, hi_dom = work.domain_bounds()
    bar = work.table.has_barrier
    if bar.any():
        blo = math.fsum(np.where(bar, lo_dom, -np.inf))
        bhi = math.fsum(np.where(bar, hi_dom, np.inf))
        if not blo < b < bhi and np.all(bar):
            raise InfeasibleProblemError(f"b={b} is not inside the open barrier range ({blo}, {bhi})")

    def total(lam: float) -> tuple[float, np.ndarray]:
        x = _inverse_gradient(work, lam)
        return math.fsum(x) - b, x

    lam_lo, lam_hi = -1.0, 1.0
    s_lo, x_lo = total(lam_lo)
    step = 1.0
    for _ in range(2000):
        if s_lo <= 0:
            break
        step *= 2.0
        lam_lo -= step
        s_lo, x_lo = total(lam_lo)
    else:
        raise InfeasibleProblemError("no multiplier brings the allocation down to b")
    s_hi, x_hi = total(lam_hi)
    step = 1.0
    for _ in range(2000):
        if s_hi >= 0:
            break
        step *= 2.0
        lam_hi += step
        s_hi, x_hi = total(lam_hi)
    else:
        raise InfeasibleProblemError("no multiplier brings the allocation up to b")
    _check_monotone(work, np.minimum(x_lo, x_hi) - 1.0, np.maximum(x_lo, x_hi) + 1.0)

    x = x_lo if abs(s_lo) <= abs(s_hi) else x_hi
    s = min(abs(s_lo), abs(s_hi))
    for _ in range(2200):
        if s <= tol:
            break
        mid = 0.5 * (lam_lo + lam_hi)
        if not lam_lo < mid < lam_hi:
            break
        s_mid, x_mid = total(mid)
        if abs(s_mid) < s:
            s, x = abs(s_mid), x_mid
        if s_mid > 0:
            lam_hi = mid
        elif s_mid < 0:
            lam_lo = mid
        else:
            break
    x = _restore_feasibility(x, b, lo_dom, hi_dom, bar)
    if spec.weights is not None:
        return x / np.asarray(spec.weights)
    return x


def _restore_feasibility(x: np.ndarray, b: float, lo: np.ndarray, hi: np.ndarray, bar: np.ndarray) -> np.ndarray:
    # a uniform shift leaves every gradient equal to first order
    y = x - (math.fsum(x) - b) / x.size
    y[-1] -= math.fsum(y) - b
    if np.any(bar & ~((y > lo) & (y < hi))):
        return x
    return y


def quadratic_closed_form(spec: ProblemSpec) -> np.ndarray:
    """KKT solution for unboxed, unaugmented quadratic costs with ``scale = 1``."""
    pis, rs = [], []
    for c in spec.costs:
        if not isinstance(c.base, Quadratic) or c.augmentation is not None or c.scale != 1.0:
            raise ValueError("closed form needs plain quadratic costs")
        pis.append(c.base.pi)
        rs.append(c.base.r)
    pi, r = np.asarray(pis), np.asarray(rs)
    lam = (spec.b - np.sum(r / pi)) / np.sum(1.0 / pi)
    return (lam + r) / pi


# -- metrics ------------------------------------------------------------------


def dispersion(spec: ProblemSpec, x) -> np.ndarray:
    """Gradient vector minus its mean (unweighted variable)."""
    g = reweight(spec).gradient(np.asarray(x, dtype=float))
    return g - np.mean(g, axis=-1, keepdims=True)


def residual(spec: ProblemSpec, x, x_star) -> np.ndarray:
    """``F(x) - F(x*)`` for feasible ``x``, evaluated without cancellation.

    Equal to the summed Bregman divergences ``sum_i D_i(x_i, x*_i)`` plus a
    first-order correction ``lam (sum(x) - b)``; both forms agree exactly at
    the true optimum.
    """
    work = reweight(spec)
    x = np.asarray(x, dtype=float)
    xs = np.asarray(x_star, dtype=float)
    lam = float(np.mean(work.gradient(xs)))
    breg = np.sum(work.table.bregman(x, xs), axis=-1)
    if x.ndim == 1:
        drift = math.fsum(x) - work.b
    else:
        drift = np.array([math.fsum(row) for row in x]) - work.b
    return breg + lam * drift


def residual_series(spec: ProblemSpec, traj: Trajectory, x_star) -> np.ndarray:
    return residual(spec, traj.states, x_star)


@dataclass(frozen=True)
class Certificate:
    name: str
    value: float
    status: str
    slack: float = float("nan")
    note: str = ""

    @property
    def holds(self) -> bool:
        return self.status == HOLDS


@dataclass(frozen=True)
class SandwichReport:
    checks: dict[str, bool]
    slacks: dict[str, float]
    applicable: bool = True

    @property
    def all_hold(self) -> bool:
        return self.applicable and all(self.checks.values())


def sandwich_check(
    spec: ProblemSpec, x, x_star, v: float, u: float, rtol: float = 1e-8, atol: float = 0.0
) -> SandwichReport:
    """Distance, dispersion and residual sandwiches for a feasible state.

    ``v |e|^2 <= Fbar <= u |e|^2``, ``|xi|/(2u) <= |e| <= |xi|/(2v)`` and
    ``|xi|^2/(4u) <= Fbar <= |xi|^2/(4v)`` with ``e = x - x*``. Slacks are
    ``right - left`` for each inequality; ``atol`` absorbs solver noise near ``x*``.
    """
    if not v > 0:
        return SandwichReport({}, {}, applicable=False)
    x = np.asarray(x, dtype=float)
    xs = np.asarray(x_star, dtype=float)
    fbar = float(residual(spec, x, xs))
    e = float(np.linalg.norm(x - xs))
    xi = float(np.linalg.norm(dispersion(spec, x)))
    pairs = {
        "dist_lower": (v * e * e, fbar),
        "dist_upper": (fbar, u * e * e),
        "xi_lower": (xi / (2.0 * u), e),
        "xi_upper": (e, xi / (2.0 * v)),
        "res_lower": (xi * xi / (4.0 * u), fbar),
        "res_upper": (fbar, xi * xi / (4.0 * v)),
    }
    checks, slacks = {}, {}
    for name, (left, right) in pairs.items():
        slack = right - left
        scale = max(abs(left), abs(right))
        checks[name] = slack >= -rtol * scale - atol
        slacks[name] = slack
    return SandwichReport(checks, slacks)


def epsilon_certificate(spec: ProblemSpec | None, q: float, v: float, n: int | None = None) -> float | None:
    """Accuracy radius ``sqrt(n) q / (4 v)`` under uniform quantization; ``None`` when ``v = 0``."""
    n = spec.n if n is None else n
    if not q > 0:
        raise ValueError("quantization level must be positive")
    if not v > 0:
        return None
    return math.sqrt(n) * q / (4.0 * v)


def quantization_inverse_design(epsilon: float, v: float, n: int) -> float:
    """Coarsest quantization level that still guarantees accuracy ``epsilon``."""
    if not (epsilon > 0 and v > 0 and n >= 1):
        raise ValueError("epsilon, v must be positive and n >= 1")
    return 4.0 * v * epsilon / math.sqrt(n)


def _union_laplacian_spectrum(network: WeightedGraph | GraphSchedule, window: int | None):
    if isinstance(network, WeightedGraph):
        return spectrum(laplacian(network)), network.is_undirected, False
    if network.is_static:
        g = network.frames[0][0]
        return spectrum(laplacian(g)), g.is_undirected, False
    u = network.union(0, window)
    return spectrum(laplacian(u)), u.is_undirected, True


def rate_certificate(
    traj: Trajectory,
    spec: ProblemSpec,
    x_star,
    network: WeightedGraph | GraphSchedule,
    h: NonlinearMap,
    eta: float,
    v: float,
    u: float,
    window: int = 1,
    tol: float = 1e-10,
    floor: float = 1e-12,
    fbar: np.ndarray | None = None,
    z_max: float | None = None,
) -> Certificate:
    """Compare measured ``Fbar(k+B)/Fbar(k)`` with the linear-rate bound.

    ``window`` is ``B``; for a time-varying network the bound uses the union
    Laplacian over ``B`` steps (a heuristic extension, noted in the result).
    """
    spec_l, undirected, union = _union_laplacian_spectrum(network, window if window > 1 else None)
    if not undirected or not spec_l.usable:
        return Certificate("rate", float("nan"), NOT_APPLICABLE, note="needs a connected undirected network")
    if z_max is None:
        z_max = _map_argument_range(reweight(spec).gradient(traj.states), traj.config.link)
    sector = h.sector_bounds(z_max=z_max)
    if sector is None or not v > 0:
        return Certificate("rate", float("nan"), NOT_APPLICABLE, note="needs a sector map and v > 0")
    al, au = sector
    limit = max_step_size(spec_l, u, al, au)
    if limit is None or eta > limit:
        return Certificate("rate", float("nan"), NOT_APPLICABLE, note="step size exceeds the certified bound")
    bound = rate_bound(spec_l, u, v, al, au, eta)
    fb = residual_series(spec, traj, x_star) if fbar is None else fbar
    if fb.size <= window:
        return Certificate("rate", bound, HOLDS, slack=float("inf"), note="vacuous: trajectory too short")
    prev, nxt = fb[:-window], fb[window:]
    mask = prev > floor
    note = "heuristic extension: union-graph spectrum" if union else ""
    if not mask.any():
        return Certificate("rate", bound, HOLDS, slack=float("inf"), note=(note + "; vacuous").strip("; "))
    ratios = nxt[mask] / prev[mask]
    worst = float(np.max(ratios))
    slack = bound - worst
    return Certificate("rate", bound, HOLDS if slack >= -tol else VIOLATED, slack=slack, note=note)


def window_certificate(fbar: np.ndarray, window: int, floor: float = 1e-12) -> Certificate:
    """Residual non-increase over windows of ``window`` steps."""
    if fbar.size <= window:
        return Certificate(f"window_decrease_B{window}", 0.0, HOLDS, slack=float("inf"))
    prev, nxt = fbar[:-window], fbar[window:]
    mask = prev > floor
    if not mask.any():
        return Certificate(f"window_decrease_B{window}", 0.0, HOLDS, slack=float("inf"))
    worst = float(np.max(nxt[mask] / prev[mask]))
    return Certificate(f"window_decrease_B{window}", worst, HOLDS if worst <= 1.0 else VIOLATED, slack=1.0 - worst)


def _map_argument_range(g: np.ndarray, link: bool) -> float:
    """Largest ``|z|`` fed to ``h``: gradients (link-based) or gradient differences (node-based)."""
    if link:
        return float(np.max(np.abs(g)))
    return float(np.max(np.max(g, axis=-1) - np.min(g, axis=-1)))


def random_feasible_states(
    spec: ProblemSpec,
    x_star: np.ndarray,
    count: int,
    rng: np.random.Generator,
    radius: float | None = None,
) -> np.ndarray:
    """States ``x* + e`` with ``sum(e) = 0``, kept inside every agent's box.

    Directions are Gaussian projected onto ``sum(e) = 0``; lengths are uniform
    up to ``radius`` and then shrunk to stay within the boxes.
    """
    work = reweight(spec)
    lo, hi = work.domain_bounds()
    n = work.n
    xs = np.asarray(x_star, dtype=float)
    out = np.empty((count, n))
    if radius is None:
        finite = np.isfinite(hi - lo)
        radius = float(np.min((hi - lo)[finite])) / 2.0 if finite.any() else max(abs(work.b), 1.0)
    for k in range(count):
        d = rng.standard_normal(n)
        d -= d.mean()
        norm = np.linalg.norm(d)
        if norm == 0:
            out[k] = xs
            continue
        d /= norm
        r = radius * rng.uniform(0.0, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            room = np.where(d > 0, (hi - xs) / d, np.where(d < 0, (lo - xs) / d, np.inf))
        r = min(r, 0.999 * float(np.min(room)))
        e = r * d
        e -= np.mean(e)
        out[k] = xs + e
    return out


# -- whole-run report ---------------------------------------------------------


@dataclass
class AnalysisReport:
    """Metrics and certificates for one trajectory."""

    x_star: np.ndarray
    f_star: float
    feasibility_drift: float
    residuals: np.ndarray
    dispersion_norms: np.ndarray
    distances: np.ndarray
    final_distance: float
    final_kkt_residual: float
    tail_mean_distance: float
    tail_oscillation: float
    v: float
    u: float
    intervals: list[tuple[float, float]]
    certificates: list[Certificate] = field(default_factory=list)

    def certificate(self, name: str) -> Certificate:
        for c in self.certificates:
            if c.name == name:
                return c
        raise KeyError(name)


def analyze(
    spec: ProblemSpec,
    traj: Trajectory,
    network: WeightedGraph | GraphSchedule,
    *,
    x_star: np.ndarray | None = None,
    v: float | None = None,
    u: float | None = None,
    intervals=None,
    tail_fraction: float = 0.1,
    tail_min: int = 100,
    window: int | None = None,
    rate_tol: float = 1e-10,
    monotone_tol: float = 1e-12,
    kkt_tol: float | None = None,
    distance_tol: float | None = None,
    residual_tol: float | None = None,
) -> AnalysisReport:
    """Evaluate a finished run against the oracle and issue all certificates.

    ``kkt_tol``, ``distance_tol`` and ``residual_tol`` add pass/fail checks on
    the final state; without them those quantities are only reported.
    """
    work = reweight(spec)
    xs = solve_oracle(work) if x_star is None else np.asarray(x_star, dtype=float)
    vv, uu, used = curvature_bounds(work, intervals=intervals, x_star=xs)
    v_all = float(np.min(vv)) if v is None else float(v)
    u_all = float(np.max(uu)) if u is None else float(u)
    states = traj.states
    sums = traj.sums()
    drift = float(np.max(np.abs(sums - work.b)))
    fbar = residual(work, states, xs)
    grads = work.gradient(states)
    xi = np.linalg.norm(grads - np.mean(grads, axis=1, keepdims=True), axis=1)
    z_max = _map_argument_range(grads, traj.config.link)
    dist = np.linalg.norm(states - xs, axis=1)
    K = traj.steps
    tail_len = min(K + 1, max(tail_min, int(math.ceil(tail_fraction * K))))
    tail = dist[-tail_len:]
    h = traj.config.nonlinearity
    eta = traj.config.step_size
    certs: list[Certificate] = []

    tol_feas = 1e-9 * (1.0 + abs(work.b))
    certs.append(Certificate("feasibility", drift, HOLDS if drift <= tol_feas else VIOLATED, slack=tol_feas - drift))

    schedule = network if isinstance(network, GraphSchedule) else GraphSchedule.static(network)
    B = window if window is not None else (1 if schedule.is_static else schedule.period)
    spec_l, undirected, union = _union_laplacian_spectrum(network, B if B > 1 else None)
    if undirected and spec_l.usable and u_all > 0:
        sector = h.sector_bounds(z_max=z_max)
        bound = max_step_size(spec_l, u_all, *(sector or (None, None)))
        if bound is None:
            certs.append(Certificate("step_size", float("nan"), NOT_APPLICABLE, note=f"{h.kind} has no finite sector"))
        else:
            note = "heuristic extension: union-graph spectrum" if union else ""
            certs.append(Certificate("step_size", bound, HOLDS if eta <= bound else VIOLATED, slack=bound - eta, note=note))
    else:
        certs.append(Certificate("step_size", float("nan"), NOT_APPLICABLE, note="needs a connected undirected network"))

    if B == 1:
        certs.append(rate_certificate(traj, work, xs, network, h, eta, v_all, u_all, tol=rate_tol, fbar=fbar,
                                      z_max=z_max))
    else:
        rc = rate_certificate(traj, work, xs, network, h, eta, v_all, u_all, window=B, tol=rate_tol, fbar=fbar,
                              z_max=z_max)
        certs.append(rc)
        certs.append(window_certificate(fbar, B))

    if h.kind == "uniform_quantizer":
        eps = epsilon_certificate(work, h.level, v_all)
        if eps is None:
            certs.append(Certificate("epsilon", float("nan"), NOT_APPLICABLE, note="v = 0: cost not strongly convex"))
        else:
            worst = float(np.max(tail))
            certs.append(Certificate("epsilon", eps, HOLDS if worst < eps else VIOLATED, slack=eps - worst))
    else:
        certs.append(Certificate("epsilon", float("nan"), NOT_APPLICABLE, note="only for uniform quantization"))

    rise = float(np.max(np.diff(fbar))) if fbar.size > 1 else 0.0
    certs.append(Certificate("monotone_residual", rise, HOLDS if rise <= monotone_tol else VIOLATED,
                             slack=monotone_tol - rise, note="largest one-step residual increase"))
    kkt = kkt_residual(work, states[-1])
    dfin = float(dist[-1])
    for name, value, limit in (("kkt", kkt, kkt_tol), ("distance", dfin, distance_tol), ("residual", float(fbar[-1]), residual_tol)):
        if limit is None:
            certs.append(Certificate(name, value, NOT_APPLICABLE, note="no tolerance configured"))
        else:
            certs.append(Certificate(name, value, HOLDS if value <= limit else VIOLATED, slack=limit - value))

    return AnalysisReport(
        x_star=xs,
        f_star=work.value(xs),
        feasibility_drift=drift,
        residuals=fbar,
        dispersion_norms=xi,
        distances=dist,
        final_distance=dfin,
        final_kkt_residual=kkt,
        tail_mean_distance=float(np.mean(tail)),
        tail_oscillation=float(np.max(np.max(states[-tail_len:], axis=0) - np.min(states[-tail_len:], axis=0))),
        v=v_all,
        u=u_all,
        intervals=used,
        certificates=certs,
    )
