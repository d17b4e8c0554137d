"""Pure-numpy implementation of the protocol inner loop.

Mirrors ``_core.pyx`` argument for argument; :mod:`nlalloc.kernels` picks one
at import time.
"""

from __future__ import annotations

import numpy as np

from .nonlinearity import (
    MAP_IDENTITY,
    MAP_LOG_QUANT,
    MAP_SATURATION,
    MAP_SIGNPOWER,
    MAP_UNIFORM_QUANT,
    round_half_away,
)
from .objective import CostTable

STATUS_OK = 0
STATUS_DIVERGED = 1
STATUS_DOMAIN = 2

DIVERGENCE_LIMIT = 1e12
BARRIER_MARGIN = 0.9


def apply_map(code: int, p1: float, p2: float, z: np.ndarray) -> np.ndarray:
    if code == MAP_IDENTITY:
        return z
    if code == MAP_SATURATION:
        return np.minimum(np.maximum(z, -p1), p1)
    if code == MAP_UNIFORM_QUANT:
        return p1 * round_half_away(z / p1)
    a = np.abs(z)
    pos = a > 0
    safe = np.where(pos, a, 1.0)
    if code == MAP_LOG_QUANT:
        mag = np.exp(p1 * round_half_away(np.log(safe) / p1))
    elif code == MAP_SIGNPOWER:
        mag = safe**p1 + safe**p2
    else:
        raise ValueError(f"unknown map code {code}")
    return np.where(pos, np.copysign(mag, z), 0.0)


def _table_from_arrays(base_kind, base_p, poly, aug_kind, aug_c, aug_p, lo, hi, scale) -> CostTable:
    return CostTable(
        base_kind=base_kind, base_p=base_p, poly=poly, aug_kind=aug_kind,
        aug_c=aug_c, aug_p=aug_p, lo=lo, hi=hi, scale=scale,
    )


def _barrier_factor(x, delta, lo, hi, barrier_mask) -> float:
    """Largest ``t <= 1`` keeping barrier agents at most 90% of the way to their boundary."""
    t = 1.0
    idx = np.flatnonzero(barrier_mask & (delta != 0))
    for i in idx:
        d = delta[i]
        room = (hi[i] - x[i]) if d > 0 else (x[i] - lo[i])
        if abs(d) >= room:
            t = min(t, BARRIER_MARGIN * room / abs(d))
    return t


def run_kernel(
    x0,
    base_kind, base_p, poly, aug_kind, aug_c, aug_p, lo, hi, scale,
    map_code, map_p1, map_p2,
    link,
    eta,
    edge_i, edge_j, edge_w, frame_ptr, frame_paired,
    step_frame,
    grid,
    states,
    applied,
):
    """Iterate ``len(step_frame)`` protocol steps, writing rows ``1..K`` of ``states``.

    Paired frames hold undirected edges ``i < j`` and move an equal and
    opposite amount across each edge, snapped to multiples of ``grid``.
    Unpaired frames hold directed edges ``(i, j, W[i, j])`` (link-based only).
    Returns ``(status, k)``; ``k`` is the number of completed steps.
    """
    table = _table_from_arrays(base_kind, base_p, poly, aug_kind, aug_c, aug_p, lo, hi, scale)
    bar = table.has_barrier
    any_bar = bool(bar.any())
    # box bounds in the decision variable, for step clipping
    xlo = np.where(scale > 0, lo / scale, hi / scale)
    xhi = np.where(scale > 0, hi / scale, lo / scale)
    n = x0.shape[0]
    x = np.array(x0, dtype=float)
    states[0] = x
    frames = [
        (edge_i[a:b], edge_j[a:b], edge_w[a:b], bool(frame_paired[f]))
        for f, (a, b) in enumerate(zip(frame_ptr[:-1], frame_ptr[1:]))
    ]
    K = step_frame.shape[0]
    for k in range(K):
        ei, ej, ew, paired = frames[step_frame[k]]
        sx = x * scale
        if any_bar and np.any(bar & ~((sx > lo) & (sx < hi))):
            return STATUS_DOMAIN, k
        g = table.gradients(x)
        if link:
            hg = apply_map(map_code, map_p1, map_p2, g)
            msg = hg[ej] - hg[ei]
        else:
            msg = apply_map(map_code, map_p1, map_p2, g[ej] - g[ei])
        delta = eta * ew * msg
        if paired:
            step = np.bincount(ei, delta, n) - np.bincount(ej, delta, n)
        else:
            step = np.bincount(ei, delta, n)
        t = _barrier_factor(x, step, xlo, xhi, bar) if any_bar else 1.0
        if paired:
            if t != 1.0:
                delta = t * delta
            delta = np.rint(delta / grid) * grid
            x = x + np.bincount(ei, delta, n)
            x = x - np.bincount(ej, delta, n)
        else:
            x = x + t * step if t != 1.0 else x + step
        states[k + 1] = x
        applied[k] = eta * t
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_LIMIT:
            return STATUS_DIVERGED, k + 1
    return STATUS_OK, K
