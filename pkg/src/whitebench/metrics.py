"""Attribution scoring: top-k precision and an exact earth-mover's score.

The EMD solver is a classic transportation simplex (northwest-corner start,
tree-structured basis, most-negative-reduced-cost pivots). Problem sizes
here are tiny (at most 64 supply bins against a handful of demand bins), so
exactness is cheap. A deterministic 1e-12 cost perturbation guards against
degenerate cycling; the reported cost always uses the original costs.
"""

from __future__ import annotations

import warnings
from collections import deque

import numpy as np


class MassMismatchError(ValueError):
    """Supply and demand masses differ."""


def precision_at_k(attr, mask, k: int | None = None) -> float:
    """Fraction of ground-truth pixels among the k largest |attribution| values.

    ``k`` defaults to the ground-truth size, making this the natural
    operating point where precision equals recall. Ties in |attribution| are
    broken toward the lowest pixel index, so results are deterministic.
    """
    a = np.abs(np.asarray(attr, dtype=np.float64)).ravel()
    m = np.asarray(mask, dtype=bool).ravel()
    if a.shape != m.shape:
        raise ValueError("attribution and mask shapes differ")
    n_true = int(m.sum())
    if n_true == 0:
        raise ValueError("ground-truth mask is empty")
    if k is None:
        k = n_true
    order = np.argsort(-a, kind="stable")
    top = order[:k]
    return float(m[top].sum() / n_true)


def _duals(basis, cost, m, n):
    """Dual variables on the spanning tree defined by the basic cells."""
    adj = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append((m + j, (i, j)))
        adj[m + j].append((i, (i, j)))
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    queue = deque([0])
    seen = [False] * (m + n)
    seen[0] = True
    while queue:
        node = queue.popleft()
        for nb, (i, j) in adj[node]:
            if seen[nb]:
                continue
            seen[nb] = True
            if nb >= m:
                v[nb - m] = cost[i, j] - u[i]
            else:
                u[nb] = cost[i, j] - v[j]
            queue.append(nb)
    return u, v


def _cycle(basis, enter, m):
    """Alternating row/column path the entering cell closes into a cycle."""
    adj = {}
    for i, j in basis:
        adj.setdefault(i, [])
        adj.setdefault(m + j, [])
    for i, j in basis:
        adj[i].append((m + j, (i, j)))
        adj[m + j].append((i, (i, j)))
    start, goal = enter[0], m + enter[1]
    parent = {start: (None, None)}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb, cell in adj.get(node, ()):
            if nb not in parent:
                parent[nb] = (node, cell)
                queue.append(nb)
    path_cells = []
    node = goal
    while parent[node][0] is not None:
        node, cell = parent[node][0], parent[node][1]
        path_cells.append(cell)
    path_cells.reverse()
    return [enter] + path_cells


def solve_transport(p, q, cost, tol: float = 1e-12):
    """Exact optimal transport plan between histograms ``p`` and ``q``.

    Returns ``(plan, total_cost)`` where the plan's row sums equal ``p`` and
    column sums equal ``q``. Masses must be non-negative and balanced to
    within 1e-12.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    m, n = p.size, q.size
    if cost.shape != (m, n):
        raise ValueError(f"cost must be {m}x{n}, got {cost.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("masses must be non-negative")
    if abs(p.sum() - q.sum()) > 1e-12 * max(1.0, p.sum()):
        raise MassMismatchError(f"mass mismatch: {p.sum()!r} vs {q.sum()!r}")

    # Deterministic tiny perturbation so degenerate pivots cannot cycle.
    pert = cost + 1e-12 * (np.arange(m)[:, None] * n + np.arange(n)[None, :]) / (m * n)

    # Northwest-corner starting basis: exactly m + n - 1 cells, a tree.
    plan = np.zeros((m, n))
    basis = []
    a, b = p.copy(), q.copy()
    i = j = 0
    while i < m - 1 or j < n - 1:
        t = min(a[i], b[j])
        plan[i, j] += t
        basis.append((i, j))
        a[i] -= t
        b[j] -= t
        if i == m - 1:
            j += 1
        elif j == n - 1:
            i += 1
        elif a[i] <= b[j]:
            i += 1
        else:
            j += 1
    plan[m - 1, n - 1] += a[m - 1]
    basis.append((m - 1, n - 1))

    basic = np.zeros((m, n), dtype=bool)
    for cell in basis:
        basic[cell] = True

    scale = max(1.0, np.abs(cost).max())
    for _ in range(200 * (m + n) * max(m, n)):
        u, v = _duals(basis, pert, m, n)
        reduced = pert - u[:, None] - v[None, :]
        reduced[basic] = 0.0
        enter_flat = int(np.argmin(reduced))
        if reduced.flat[enter_flat] >= -1e-11 * scale:
            break
        enter = divmod(enter_flat, n)
        cycle = _cycle(basis, enter, m)
        minus = cycle[1::2]
        theta_idx = min(range(len(minus)), key=lambda k: (plan[minus[k]], minus[k]))
        leave = minus[theta_idx]
        theta = plan[leave]
        for cell in cycle[0::2]:
            plan[cell] += theta
        for cell in cycle[1::2]:
            plan[cell] -= theta
        plan[leave] = 0.0
        basis.remove(leave)
        basis.append(enter)
        basic[leave] = False
        basic[enter] = True
    else:
        raise RuntimeError("transportation simplex failed to converge")

    return plan, float(np.sum(plan * cost))


def _pixel_coords(height, width):
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)


def emd_score(attr, mask) -> float:
    """One minus the normalized transport cost from |attr| to the ground truth.

    Both maps are normalized to unit mass; the ground truth puts uniform mass
    on its pixels; costs are Euclidean distances between pixel centers, and
    the optimum is divided by the largest possible distance on the grid. A
    score of 1 means the attribution mass sits exactly on the ground truth.
    """
    a = np.abs(np.asarray(attr, dtype=np.float64))
    m = np.asarray(mask, dtype=bool)
    if a.shape != m.shape or a.ndim != 2:
        raise ValueError("attr and mask must be identically shaped 2-D arrays")
    if not m.any():
        raise ValueError("ground-truth mask is empty")
    h, w = a.shape
    total = a.sum()
    if total == 0.0:
        warnings.warn("all-zero attribution scored as a uniform map")
        a = np.ones_like(a)
        total = a.sum()
    coords = _pixel_coords(h, w)
    p_idx = np.flatnonzero(a.ravel() > 0)
    q_idx = np.flatnonzero(m.ravel())
    p = a.ravel()[p_idx] / total
    q = np.full(q_idx.size, 1.0 / q_idx.size)
    cost = np.sqrt(
        ((coords[p_idx][:, None, :] - coords[q_idx][None, :, :]) ** 2).sum(axis=2)
    )
    # Guard against rounding drift in the normalized masses.
    p *= q.sum() / p.sum()
    _, total_cost = solve_transport(p, q, cost)
    d_max = float(np.hypot(h - 1, w - 1))
    return 1.0 - total_cost / d_max
