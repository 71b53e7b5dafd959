"""Shared test utilities: finite-difference gradient checks, brute-force paths."""
from __future__ import annotations

import numpy as np

from diffastar import autodiff as ad
from diffastar.grid import NEIGHBOR_OFFSETS, GridMap


def fd_check(build, arrays, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build`` maps a list of GradTensors to a scalar GradTensor; ``arrays``
    are the float64 leaf values. Relative error uses max(1, |fd|) in the
    denominator so near-zero gradients are compared absolutely.
    """
    leaves = [ad.GradTensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape():
        loss = build(leaves)
    ad.backward(loss)
    grads = [np.zeros_like(a) if t.grad is None else t.grad.copy() for t, a in zip(leaves, arrays)]

    def value_at(vals):
        frozen = [ad.GradTensor(v) for v in vals]
        return float(build(frozen).values)

    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = value_at(arrays)
            flat[j] = orig - eps
            dn = value_at(arrays)
            flat[j] = orig
            fd = (up - dn) / (2.0 * eps)
            got = grads[i].ravel()[j]
            rel = abs(got - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
    return worst


def random_weighting(rng: np.random.Generator, shape) -> np.ndarray:
    """Fixed random projection so scalar losses exercise full Jacobians."""
    return rng.uniform(-1.0, 1.0, size=shape)


def bellman_ford_dist(grid: GridMap, cost: np.ndarray, start) -> np.ndarray:
    """Exhaustive relaxation shortest-path distances; slow, for tiny maps."""
    h, w = grid.shape
    passable = grid.passable_mask()
    dist = np.full((h, w), np.inf)
    dist[start] = 0.0
    for _ in range(h * w):
        changed = False
        for r in range(h):
            for c in range(w):
                if not passable[r, c] or not np.isfinite(dist[r, c]):
                    continue
                for dr, dc in NEIGHBOR_OFFSETS:
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < h and 0 <= nc < w and passable[nr, nc]:
                        cand = dist[r, c] + cost[nr, nc]
                        if cand < dist[nr, nc]:
                            dist[nr, nc] = cand
                            changed = True
        if not changed:
            break
    return dist


def random_binary_map(rng: np.random.Generator, h: int, w: int, p_obstacle: float = 0.25) -> GridMap:
    arr = (rng.random((h, w)) >= p_obstacle).astype(np.uint8)
    return GridMap(binary=arr)


def random_reachable_instance(rng: np.random.Generator, h: int, w: int, p_obstacle: float = 0.25):
    """A random map plus a start/goal pair known to be connected."""
    from diffastar.grid import ProblemInstance
    from diffastar.planners import UNREACHABLE_COST, dijkstra_field

    while True:
        grid = random_binary_map(rng, h, w, p_obstacle)
        cells = np.argwhere(grid.binary == 1)
        if len(cells) < 2:
            continue
        goal = tuple(cells[rng.integers(len(cells))])
        field = dijkstra_field(grid, goal)
        ok = np.argwhere((field != UNREACHABLE_COST) & (field > 0))
        if len(ok) == 0:
            continue
        start = tuple(ok[rng.integers(len(ok))])
        return ProblemInstance(grid=grid, start=start, goal=goal), field
