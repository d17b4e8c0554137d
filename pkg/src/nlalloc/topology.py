"""Static and time-varying communication networks.

Weights follow the convention ``W[i, j]`` = weight agent ``i`` places on the
message it receives from neighbour ``j``. The Laplacian is ``L = D - W`` with
``D = diag(sum_j W[i, j])`` so that ``(L z)_i = sum_j W[i, j] (z_i - z_j)``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TopologyError",
    "WeightedGraph",
    "GraphSchedule",
    "LaplacianSpectrum",
    "laplacian",
    "spectrum",
    "jacobi_eigenvalues",
    "is_connected",
    "is_B_connected",
    "min_connecting_window",
    "quadratic_form_bounds_check",
    "cycle",
    "path",
    "complete",
    "from_edges",
]


class TopologyError(ValueError):
    """Invalid graph, schedule, or spectral request."""


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Weighted digraph on ``n`` agents with zero diagonal."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise TopologyError(f"weights must be a non-empty square matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise TopologyError("weights must be finite")
        if np.any(w < 0):
            raise TopologyError("weights must be nonnegative")
        if np.any(np.diag(w) != 0):
            raise TopologyError("weights must have a zero diagonal")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def is_undirected(self) -> bool:
        return bool(np.array_equal(self.weights, self.weights.T))

    @property
    def is_weight_balanced(self) -> bool:
        w = self.weights
        scale = float(w.max()) if w.size else 0.0
        if scale == 0.0:
            return True
        tol = 1e-12 * scale
        return bool(np.all(np.abs(w.sum(axis=1) - w.sum(axis=0)) <= tol))

    def support(self) -> np.ndarray:
        """Boolean undirected support ``W[i,j] > 0 or W[j,i] > 0``."""
        s = self.weights > 0
        return s | s.T

    def edges(self) -> list[tuple[int, int, float]]:
        """Directed edges ``(i, j, W[i, j])`` with positive weight, row-major."""
        ii, jj = np.nonzero(self.weights)
        return [(int(i), int(j), float(self.weights[i, j])) for i, j in zip(ii, jj)]

    def undirected_edges(self) -> list[tuple[int, int, float]]:
        """Pairs ``i < j`` of a symmetric graph."""
        if not self.is_undirected:
            raise TopologyError("undirected_edges requires symmetric weights")
        ii, jj = np.nonzero(np.triu(self.weights, k=1))
        return [(int(i), int(j), float(self.weights[i, j])) for i, j in zip(ii, jj)]

    def __add__(self, other: "WeightedGraph") -> "WeightedGraph":
        if not isinstance(other, WeightedGraph):
            return NotImplemented
        if other.n != self.n:
            raise TopologyError("cannot add graphs of different size")
        return WeightedGraph(self.weights + other.weights)

    def __repr__(self) -> str:
        return f"WeightedGraph(n={self.n}, edges={int(np.count_nonzero(self.weights))})"


def from_edges(
    n: int,
    edges: Iterable[Sequence[float]],
    *,
    directed: bool = False,
) -> WeightedGraph:
    """Build a graph from ``(i, j)`` or ``(i, j, w)`` tuples.

    Undirected edges set both ``W[i, j]`` and ``W[j, i]``. Directed edges set
    ``W[i, j]`` only. Repeated edges accumulate.
    """
    w = np.zeros((n, n))
    for e in edges:
        if len(e) not in (2, 3):
            raise TopologyError(f"edge must be (i, j) or (i, j, w), got {e!r}")
        i, j = int(e[0]), int(e[1])
        weight = float(e[2]) if len(e) == 3 else 1.0
        if not (0 <= i < n and 0 <= j < n):
            raise TopologyError(f"edge {e!r} out of range for n={n}")
        if i == j:
            raise TopologyError(f"self-loop {e!r} not allowed")
        w[i, j] += weight
        if not directed:
            w[j, i] += weight
    return WeightedGraph(w)


def cycle(n: int, weight: float = 1.0) -> WeightedGraph:
    if n < 1:
        raise TopologyError("cycle needs n >= 1")
    if n == 1:
        return WeightedGraph(np.zeros((1, 1)))
    if n == 2:
        return from_edges(2, [(0, 1, weight)])
    return from_edges(n, [(i, (i + 1) % n, weight) for i in range(n)])


def path(n: int, weight: float = 1.0) -> WeightedGraph:
    if n < 1:
        raise TopologyError("path needs n >= 1")
    return from_edges(n, [(i, i + 1, weight) for i in range(n - 1)])


def complete(n: int, weight: float = 1.0) -> WeightedGraph:
    if n < 1:
        raise TopologyError("complete needs n >= 1")
    w = np.full((n, n), float(weight))
    np.fill_diagonal(w, 0.0)
    return WeightedGraph(w)


def laplacian(g: WeightedGraph) -> np.ndarray:
    """``D - W`` with in-neighbour weight sums on the diagonal."""
    w = g.weights
    lap = -w.copy()
    lap[np.diag_indices(g.n)] = w.sum(axis=1)
    return lap


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm drops below
    ``tol * ||a||_F``. Returns eigenvalues in ascending order.
    """
    a = np.array(a, dtype=float, copy=True)
    n = a.shape[0]
    norm = np.linalg.norm(a)
    if n == 1 or norm == 0.0:
        return np.sort(np.diag(a))
    threshold = tol * norm
    for _ in range(max_sweeps):
        # measured directly: sum(a*a) - sum(diag**2) cancels to ~sqrt(eps) * ||a||
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off < threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-150 * abs(diff):
                    # theta would overflow; t ~ 1 / (2 theta)
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                a[p, q] = a[q, p] = 0.0
    else:
        raise TopologyError("Jacobi eigensolver did not converge")
    return np.sort(np.diag(a))


@dataclass(frozen=True)
class LaplacianSpectrum:
    """Sorted Laplacian eigenvalues plus the two extremes used by step-size bounds.

    ``lambda2`` is the smallest eigenvalue above ``1e-9 * lambdaN`` and is
    ``None`` when no such eigenvalue exists (single node, empty graph).
    ``disconnected`` is set when more than one eigenvalue sits at zero.
    """

    eigenvalues: tuple[float, ...]
    lambda2: float | None
    lambdaN: float
    disconnected: bool = field(default=False)

    @property
    def usable(self) -> bool:
        """True when bounds built on ``lambda2``/``lambdaN`` are meaningful."""
        return self.lambda2 is not None and not self.disconnected


def spectrum(lap: np.ndarray) -> LaplacianSpectrum:
    lap = np.asarray(lap, dtype=float)
    if not np.allclose(lap, lap.T, rtol=0.0, atol=1e-9):
        raise TopologyError(
            "spectrum requires a symmetric Laplacian; pass the symmetrized part "
            "(L + L.T) / 2 since step-size bounds hold for undirected networks only"
        )
    eig = jacobi_eigenvalues((lap + lap.T) / 2.0)
    lam_n = float(eig[-1])
    cut = 1e-9 * lam_n
    nonzero = eig[eig > cut]
    lam2 = float(nonzero[0]) if nonzero.size else None
    n_zero = int(np.count_nonzero(eig <= cut))
    return LaplacianSpectrum(
        eigenvalues=tuple(float(e) for e in eig),
        lambda2=lam2,
        lambdaN=lam_n,
        disconnected=n_zero > 1 or lam2 is None and eig.size > 1,
    )


def _connected_support(support: np.ndarray) -> bool:
    n = support.shape[0]
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(support[i] & ~seen):
            seen[j] = True
            queue.append(int(j))
    return bool(seen.all())


def is_connected(g: WeightedGraph) -> bool:
    """Connectivity of the undirected support."""
    return _connected_support(g.support())


@dataclass(frozen=True)
class GraphSchedule:
    """Piecewise-constant network: each frame is held for ``duration`` steps.

    After the last frame the schedule restarts (``cyclic=True``) or holds the
    last frame forever.
    """

    frames: tuple[tuple[WeightedGraph, int], ...]
    cyclic: bool = True

    def __post_init__(self) -> None:
        frames = tuple((g, int(d)) for g, d in self.frames)
        if not frames:
            raise TopologyError("schedule needs at least one frame")
        n = frames[0][0].n
        for g, d in frames:
            if g.n != n:
                raise TopologyError("all frames must share the same n")
            if d < 1:
                raise TopologyError("frame duration must be >= 1")
        object.__setattr__(self, "frames", frames)

    @classmethod
    def static(cls, g: WeightedGraph) -> "GraphSchedule":
        return cls(((g, 1),), cyclic=True)

    @property
    def n(self) -> int:
        return self.frames[0][0].n

    @property
    def period(self) -> int:
        return sum(d for _, d in self.frames)

    @property
    def is_static(self) -> bool:
        return len(self.frames) == 1

    def frame_index(self, k: int) -> int:
        """Index of the frame active during step ``k``."""
        p = self.period
        if k >= p:
            if not self.cyclic:
                return len(self.frames) - 1
            k %= p
        for idx, (_, d) in enumerate(self.frames):
            if k < d:
                return idx
            k -= d
        raise AssertionError("unreachable")

    def frame_indices(self, steps: int) -> np.ndarray:
        """Frame index for each of ``steps`` consecutive steps from ``k = 0``."""
        one_period = np.repeat(np.arange(len(self.frames)), [d for _, d in self.frames])
        if steps <= one_period.size:
            return one_period[:steps].astype(np.int64)
        if self.cyclic:
            reps = -(-steps // one_period.size)
            return np.tile(one_period, reps)[:steps].astype(np.int64)
        tail = np.full(steps - one_period.size, len(self.frames) - 1)
        return np.concatenate([one_period, tail]).astype(np.int64)

    def graph_at(self, k: int) -> WeightedGraph:
        return self.frames[self.frame_index(k)][0]

    def union(self, start: int = 0, length: int | None = None) -> WeightedGraph:
        """Sum of the active weights over steps ``start .. start+length-1``.

        Repeated edges are summed across the window. ``length`` defaults to
        one full period.
        """
        length = self.period if length is None else length
        w = np.zeros((self.n, self.n))
        for k in range(start, start + length):
            w += self.graph_at(k).weights
        return WeightedGraph(w)

    def with_durations(self, duration: int) -> "GraphSchedule":
        return GraphSchedule(tuple((g, duration) for g, _ in self.frames), cyclic=self.cyclic)


def is_B_connected(s: GraphSchedule, B: int) -> bool:
    """Whether the union over every window of ``B`` consecutive steps is connected."""
    if B < 1:
        raise TopologyError("B must be >= 1")
    p = s.period
    starts = range(p) if s.cyclic else range(p + 1)
    supports = [s.graph_at(k).support() for k in range(p + B + 1)]
    for t in starts:
        acc = np.zeros((s.n, s.n), dtype=bool)
        for k in range(t, t + B):
            acc |= supports[k] if (k < len(supports)) else s.graph_at(k).support()
        if not _connected_support(acc):
            return False
    return True


def min_connecting_window(s: GraphSchedule, limit: int | None = None) -> int | None:
    """Smallest ``B`` making ``s`` B-connected, or ``None`` within ``limit``."""
    limit = 2 * s.period if limit is None else limit
    for B in range(1, limit + 1):
        if is_B_connected(s, B):
            return B
    return None


def quadratic_form_bounds_check(lap: np.ndarray, x: np.ndarray, rtol: float = 1e-8) -> bool:
    """Check ``lambda2 |xbar|^2 <= x'Lx <= lambdaN |xbar|^2`` and ``x'Lx == xbar'L xbar``."""
    lap = np.asarray(lap, dtype=float)
    x = np.asarray(x, dtype=float)
    spec = spectrum(lap)
    xbar = x - x.mean()
    q = float(x @ lap @ x)
    qbar = float(xbar @ lap @ xbar)
    nb = float(xbar @ xbar)
    scale = max(abs(q), spec.lambdaN * nb, 1e-300)
    lam2 = spec.lambda2 if spec.lambda2 is not None else 0.0
    if abs(q - qbar) > rtol * scale + 1e-12 * spec.lambdaN * float(x @ x):
        return False
    lower_ok = lam2 * nb <= q + rtol * scale
    upper_ok = q <= spec.lambdaN * nb + rtol * scale
    return bool(lower_ok and upper_ok)
