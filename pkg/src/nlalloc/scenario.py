"""Scenario files: TOML documents that pin a problem, network, protocol and seed.

Random parameters are drawn from ``numpy.random.Generator(PCG64(seed))`` in a
fixed order: problem parameters in the order listed in ``_DRAW_ORDER`` for the
cost kind, each as one vector of ``n`` draws, before anything else. The format
is documented in ``docs/scenario_schema.md``.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import nonlinearity as nl
from .objective import (
    AgentCost,
    Barrier,
    Box,
    ObjectiveError,
    Penalty,
    Polynomial,
    ProblemSpec,
    Quadratic,
    QuadraticCpuCost,
    Quartic,
)
from .protocol import VARIANTS, ProtocolConfig
from .topology import GraphSchedule, TopologyError, WeightedGraph, complete, cycle, from_edges, path

__all__ = ["ScenarioError", "AnalysisOptions", "Scenario", "load_scenario", "parse_scenario",
           "bundled_scenarios", "resolve_scenario_path"]

_DRAW_ORDER = {
    "cpu_quadratic": ("pi", "rho", "occupied"),
    "quadratic": ("pi", "r"),
    "quartic": ("alpha", "omega"),
}

CERTIFICATE_NAMES = ("feasibility", "step_size", "rate", "window_decrease", "epsilon",
                     "monotone_residual", "kkt", "distance", "residual")


class ScenarioError(ValueError):
    """Scenario file is malformed or describes an inconsistent setup."""


@dataclass(frozen=True)
class AnalysisOptions:
    tail_fraction: float = 0.1
    tail_min: int = 100
    window: int | None = None
    rate_tol: float = 1e-10
    monotone_tol: float = 1e-12
    kkt_tol: float | None = None
    distance_tol: float | None = None
    residual_tol: float | None = None
    asserted: tuple[str, ...] = ("feasibility",)
    intervals: tuple[tuple[float, float], ...] | None = None


@dataclass
class Scenario:
    name: str
    seed: int
    spec: ProblemSpec
    network: GraphSchedule
    config: ProtocolConfig
    analysis: AnalysisOptions
    stride: int = 1
    realized: dict[str, list[float]] = field(default_factory=dict)
    source: dict[str, Any] = field(default_factory=dict)


# -- field helpers ------------------------------------------------------------


def _get(table: dict, key: str, where: str, kind=None, default=...):
    if key not in table:
        if default is ...:
            raise ScenarioError(f"{where}.{key}: required field is missing")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind) or isinstance(value, bool) and kind in (int, float):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ScenarioError(f"{where}.{key}: expected {name}, got {type(value).__name__}")
    return value


def _section(doc: dict, key: str, required: bool = True) -> dict:
    if key not in doc:
        if required:
            raise ScenarioError(f"[{key}]: required section is missing")
        return {}
    value = doc[key]
    if not isinstance(value, dict):
        raise ScenarioError(f"[{key}]: expected a table")
    return value


def _unknown_keys(table: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(table) - allowed)
    if extra:
        raise ScenarioError(f"{where}: unknown field(s) {', '.join(extra)}")


def _vector(value, n: int, where: str, rng: np.random.Generator) -> np.ndarray:
    """A scalar (broadcast), a list of ``n`` numbers, or ``{uniform = [lo, hi]}``."""
    if isinstance(value, bool):
        raise ScenarioError(f"{where}: expected a number, list or distribution")
    if isinstance(value, (int, float)):
        return np.full(n, float(value))
    if isinstance(value, list):
        if len(value) != n or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ScenarioError(f"{where}: expected a list of {n} numbers")
        return np.asarray(value, dtype=float)
    if isinstance(value, dict):
        _unknown_keys(value, {"uniform"}, where)
        bounds = value.get("uniform")
        if not (isinstance(bounds, list) and len(bounds) == 2 and all(isinstance(v, (int, float)) for v in bounds)):
            raise ScenarioError(f"{where}.uniform: expected [low, high]")
        lo, hi = float(bounds[0]), float(bounds[1])
        if not lo <= hi:
            raise ScenarioError(f"{where}.uniform: low must not exceed high")
        return rng.uniform(lo, hi, n)
    raise ScenarioError(f"{where}: expected a number, list or distribution")


# -- sections -----------------------------------------------------------------


def _augmentation(table: dict, where: str):
    if not table:
        return None
    _unknown_keys(table, {"kind", "c", "mu", "kappa"}, where)
    kind = _get(table, "kind", where, str)
    c = _get(table, "c", where, float, 1.0)
    if kind == "max":
        return Penalty("max", c)
    if kind == "softplus":
        return Penalty("softplus", c, _get(table, "mu", where, float, 1.0))
    if kind == "power":
        return Penalty("power", c, float(_get(table, "kappa", where, int, 2)))
    if kind in ("log", "inverse"):
        return Barrier(kind, c)
    raise ScenarioError(f"{where}.kind: unknown augmentation {kind!r}")


def _problem(table: dict, rng: np.random.Generator):
    where = "problem"
    _unknown_keys(table, {"kind", "n", "b", "weights", "box", "augmentation", "pi", "rho", "occupied",
                          "r", "alpha", "omega", "coeffs"}, where)
    kind = _get(table, "kind", where, str)
    n = _get(table, "n", where, int)
    if n < 1:
        raise ScenarioError("problem.n: must be positive")
    realized: dict[str, list[float]] = {}
    params: dict[str, np.ndarray] = {}
    if kind in _DRAW_ORDER:
        for key in _DRAW_ORDER[kind]:
            params[key] = _vector(_get(table, key, where), n, f"{where}.{key}", rng)
            realized[key] = params[key].tolist()
    elif kind != "polynomial":
        raise ScenarioError(f"problem.kind: unknown cost kind {kind!r}")

    box_t = _get(table, "box", where, dict, {})
    _unknown_keys(box_t, {"lower", "upper"}, f"{where}.box")
    aug = _augmentation(_get(table, "augmentation", where, dict, {}), f"{where}.augmentation")
    boxes: list[Box | None] = [None] * n
    if box_t:
        lo = _vector(_get(box_t, "lower", f"{where}.box"), n, f"{where}.box.lower", rng)
        hi = _vector(_get(box_t, "upper", f"{where}.box"), n, f"{where}.box.upper", rng)
        boxes = [Box(float(a), float(b)) for a, b in zip(lo, hi)]
    elif aug is not None:
        raise ScenarioError("problem.augmentation: needs problem.box")

    if kind == "cpu_quadratic":
        bases = [QuadraticCpuCost(p, r, u) for p, r, u in zip(params["pi"], params["rho"], params["occupied"])]
    elif kind == "quadratic":
        bases = [Quadratic(p, r) for p, r in zip(params["pi"], params["r"])]
    elif kind == "quartic":
        bases = [Quartic(w, a) for a, w in zip(params["alpha"], params["omega"])]
    else:
        coeffs = _get(table, "coeffs", where, list)
        if len(coeffs) == 0:
            raise ScenarioError("problem.coeffs: expected a list of coefficients")
        rows = [coeffs] * n if not isinstance(coeffs[0], list) else coeffs
        if len(rows) != n:
            raise ScenarioError(f"problem.coeffs: expected one list or {n} lists")
        bases = [Polynomial(tuple(float(c) for c in row)) for row in rows]

    costs = [AgentCost(base, aug, box) for base, box in zip(bases, boxes)]
    weights = _get(table, "weights", where, list, None)
    if weights is not None:
        weights = tuple(_vector(weights, n, f"{where}.weights", rng))

    b_raw = _get(table, "b", where)
    if b_raw == "balanced":
        if kind != "cpu_quadratic":
            raise ScenarioError("problem.b: 'balanced' is only defined for cpu_quadratic (b = sum(rho + occupied))")
        b = math.fsum(np.concatenate([params["rho"], params["occupied"]]))
    elif isinstance(b_raw, (int, float)) and not isinstance(b_raw, bool):
        b = float(b_raw)
    else:
        raise ScenarioError("problem.b: expected a number or 'balanced'")
    realized["b"] = [b]
    spec = ProblemSpec(costs, b, weights)
    return spec, realized


def _graph(table: dict, where: str, n_default: int | None = None) -> WeightedGraph:
    _unknown_keys(table, {"generator", "n", "weight", "edges", "directed", "duration"}, where)
    gen = _get(table, "generator", where, str, None)
    weight = _get(table, "weight", where, float, 1.0)
    n = _get(table, "n", where, int, n_default)
    if n is None:
        raise ScenarioError(f"{where}.n: required field is missing")
    if gen is not None:
        makers = {"cycle": cycle, "path": path, "complete": complete}
        if gen not in makers:
            raise ScenarioError(f"{where}.generator: unknown generator {gen!r}")
        return makers[gen](n, weight)
    edges = _get(table, "edges", where, list)
    parsed = []
    for k, e in enumerate(edges):
        if not (isinstance(e, list) and len(e) in (2, 3)):
            raise ScenarioError(f"{where}.edges[{k}]: expected [i, j] or [i, j, weight]")
        i, j = e[0], e[1]
        w = float(e[2]) if len(e) == 3 else weight
        if not (isinstance(i, int) and isinstance(j, int)):
            raise ScenarioError(f"{where}.edges[{k}]: endpoints must be integers")
        parsed.append((i, j, w))
    return from_edges(n, parsed, directed=_get(table, "directed", where, bool, False))


def _network(table: dict, n: int) -> GraphSchedule:
    where = "network"
    frames = table.get("frames")
    if frames is None:
        return GraphSchedule.static(_graph(table, where, n))
    _unknown_keys(table, {"frames", "cyclic"}, where)
    if not isinstance(frames, list) or not frames:
        raise ScenarioError("network.frames: expected a non-empty array of tables")
    built = []
    for k, f in enumerate(frames):
        w = f"network.frames[{k}]"
        if not isinstance(f, dict):
            raise ScenarioError(f"{w}: expected a table")
        duration = _get(f, "duration", w, int, 1)
        built.append((_graph(f, w, n), duration))
    return GraphSchedule(tuple(built), cyclic=_get(table, "cyclic", where, bool, True))


def _nonlinearity(table: dict) -> nl.NonlinearMap:
    where = "nonlinearity"
    kind = _get(table, "kind", where, str, "identity")
    allowed = {"identity": set(), "saturation": {"level"}, "log_quantizer": {"q"},
               "uniform_quantizer": {"q"}, "signpower_sum": {"mu1", "mu2"}}
    if kind not in allowed:
        raise ScenarioError(f"nonlinearity.kind: unknown map {kind!r}")
    _unknown_keys(table, allowed[kind] | {"kind"}, where)
    if kind == "identity":
        return nl.identity()
    if kind == "saturation":
        return nl.saturation(_get(table, "level", where, float))
    if kind == "log_quantizer":
        return nl.log_quantizer(_get(table, "q", where, float))
    if kind == "uniform_quantizer":
        return nl.uniform_quantizer(_get(table, "q", where, float))
    return nl.signpower_sum(_get(table, "mu1", where, float), _get(table, "mu2", where, float))


def _protocol(table: dict, h: nl.NonlinearMap) -> ProtocolConfig:
    where = "protocol"
    _unknown_keys(table, {"variant", "eta", "steps", "dt", "init"}, where)
    variant = _get(table, "variant", where, str)
    if variant not in VARIANTS:
        raise ScenarioError(f"protocol.variant: expected one of {', '.join(VARIANTS)}")
    init = _get(table, "init", where, (str, list), "equal")
    if isinstance(init, list):
        init = tuple(float(v) for v in init)
    return ProtocolConfig(
        variant=variant,
        eta=_get(table, "eta", where, float),
        steps=_get(table, "steps", where, int),
        nonlinearity=h,
        dt=_get(table, "dt", where, float, 1e-2),
        init=init,
    )


def _analysis(table: dict) -> AnalysisOptions:
    where = "analysis"
    _unknown_keys(table, {"tail_fraction", "tail_min", "window", "rate_tol", "monotone_tol", "kkt_tol",
                          "distance_tol", "residual_tol", "assert", "intervals"}, where)
    asserted = tuple(_get(table, "assert", where, list, ["feasibility"]))
    for name in asserted:
        if name not in CERTIFICATE_NAMES:
            raise ScenarioError(f"analysis.assert: unknown certificate {name!r}")
    intervals = _get(table, "intervals", where, list, None)
    if intervals is not None:
        intervals = tuple((float(a), float(b)) for a, b in intervals)
    opts = AnalysisOptions(
        tail_fraction=_get(table, "tail_fraction", where, float, 0.1),
        tail_min=_get(table, "tail_min", where, int, 100),
        window=_get(table, "window", where, int, None),
        rate_tol=_get(table, "rate_tol", where, float, 1e-10),
        monotone_tol=_get(table, "monotone_tol", where, float, 1e-12),
        kkt_tol=_get(table, "kkt_tol", where, float, None),
        distance_tol=_get(table, "distance_tol", where, float, None),
        residual_tol=_get(table, "residual_tol", where, float, None),
        asserted=asserted,
        intervals=intervals,
    )
    if not 0 < opts.tail_fraction <= 1:
        raise ScenarioError("analysis.tail_fraction: must lie in (0, 1]")
    return opts


# -- entry points -------------------------------------------------------------


def parse_scenario(doc: dict, seed: int | None = None, default_name: str = "scenario") -> Scenario:
    """Build a :class:`Scenario` from a parsed TOML document."""
    _unknown_keys(doc, {"name", "seed", "problem", "network", "protocol", "nonlinearity", "analysis", "output"},
                  "top level")
    name = _get(doc, "name", "top level", str, default_name)
    if seed is None:
        seed = _get(doc, "seed", "top level", int, 0)
    if not 0 <= seed < 2**64:
        raise ScenarioError("seed: must be an unsigned 64-bit integer")
    rng = np.random.Generator(np.random.PCG64(seed))
    try:
        spec, realized = _problem(_section(doc, "problem"), rng)
        network = _network(_section(doc, "network"), spec.n)
        h = _nonlinearity(_section(doc, "nonlinearity", required=False))
        config = _protocol(_section(doc, "protocol"), h)
    except (ObjectiveError, TopologyError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc
    if network.n != spec.n:
        raise ScenarioError(f"network has {network.n} agents but problem.n = {spec.n}")
    analysis = _analysis(_section(doc, "analysis", required=False))
    out = _section(doc, "output", required=False)
    _unknown_keys(out, {"stride"}, "output")
    stride = _get(out, "stride", "output", int, 1)
    if stride < 1:
        raise ScenarioError("output.stride: must be positive")
    return Scenario(name, seed, spec, network, config, analysis, stride, realized, doc)


def resolve_scenario_path(ref: str | Path) -> Path:
    """A filesystem path, or the name of a bundled scenario."""
    p = Path(ref)
    if p.exists():
        return p
    name = p.name[:-5] if p.name.endswith(".toml") else p.name
    if str(p) == p.name:
        candidate = resources.files("nlalloc") / "scenarios" / f"{name}.toml"
        if candidate.is_file():
            return Path(str(candidate))
    raise ScenarioError(f"scenario file not found: {ref}")


def load_scenario(ref: str | Path, seed: int | None = None) -> Scenario:
    path = resolve_scenario_path(ref)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    except (OSError, UnicodeDecodeError) as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    return parse_scenario(doc, seed=seed, default_name=path.stem)


def bundled_scenarios() -> list[str]:
    root = resources.files("nlalloc") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))
