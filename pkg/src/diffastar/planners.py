"""Classical heap-based planners: A*, weighted A*, best-first, Dijkstra.

All planners share one engine. Priority is ``(1-w)*g + w*h`` with ties
broken by row-major cell index, then by smaller g. ``w=0.5`` is plain A*
(implemented as ``g + h``, the same ordering rescaled by 2, which keeps the
arithmetic exact), ``w=0`` is Dijkstra, ``w=1`` is greedy best-first.
"""
from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, Unreachable
from .grid import (
    NEIGHBOR_OFFSETS,
    UNREACHABLE_COST,
    GridMap,
    Node,
    ProblemInstance,
    heuristic_field,
)


@dataclass
class SearchResult:
    """Outcome of a single search.

    ``closed`` marks expanded cells (goal excluded), ``parents`` stores the
    row-major linear parent index per cell (-1 where unset), ``selections``
    is the pop order including the final goal pop.
    """

    path: list[Node]
    closed: np.ndarray
    explored_count: int
    parents: np.ndarray
    selections: list[Node]


def _backtrack(parents: np.ndarray, start: Node, goal: Node, width: int) -> list[Node]:
    path = [goal]
    cur = goal
    while cur != start:
        p = int(parents[cur])
        if p < 0:
            raise Unreachable(f"no parent chain from {goal} back to {start}")
        cur = (p // width, p % width)
        path.append(cur)
    path.reverse()
    return path


def astar_classical(
    inst: ProblemInstance,
    cost: np.ndarray | None = None,
    h_weight: float = 0.5,
) -> SearchResult:
    """Heap A* over the 8-connected grid with per-cell entry costs.

    ``cost[v]`` is paid when stepping onto ``v``; ``None`` means unit costs.
    The goal is detected on pop and never closed. Raises ``Unreachable``
    when the open list drains first.
    """
    if not 0.0 <= h_weight <= 1.0:
        raise ValueError(f"h_weight must lie in [0, 1], got {h_weight}")
    if inst.grid.kind != "binary":
        raise ValueError("classical planners need a binary map")
    h, w = inst.grid.shape
    if cost is None:
        cost = np.ones((h, w), dtype=np.float64)
    else:
        cost = np.asarray(cost, dtype=np.float64)
        if cost.shape != (h, w):
            raise ShapeMismatch("cost field shape differs from map shape")
        if cost.min() < 0.0:
            raise ValueError("cost field must be non-negative")

    heur = heuristic_field(inst.grid, inst.goal)
    passable = inst.grid.binary

    def priority(g: float, hv: float) -> float:
        if h_weight == 0.5:
            return g + hv
        return (1.0 - h_weight) * g + h_weight * hv

    g = np.full((h, w), UNREACHABLE_COST, dtype=np.float64)
    parents = np.full((h, w), -1, dtype=np.int64)
    closed = np.zeros((h, w), dtype=np.uint8)
    # 0 = unseen, 1 = open, 2 = closed
    status = np.zeros((h, w), dtype=np.uint8)
    selections: list[Node] = []

    g[inst.start] = 0.0
    status[inst.start] = 1
    sr, sc = inst.start
    heap: list[tuple[float, int, float]] = [(priority(0.0, heur[inst.start]), sr * w + sc, 0.0)]

    goal_idx = inst.goal[0] * w + inst.goal[1]
    while heap:
        _, idx, entry_g = heapq.heappop(heap)
        v = (idx // w, idx % w)
        if status[v] != 1 or entry_g != g[v]:
            continue  # stale entry or already closed
        selections.append(v)
        if idx == goal_idx:
            path = _backtrack(parents, inst.start, inst.goal, w)
            return SearchResult(path, closed, int(closed.sum()), parents, selections)
        status[v] = 2
        closed[v] = 1
        for dr, dc in NEIGHBOR_OFFSETS:
            nr, nc = v[0] + dr, v[1] + dc
            if not (0 <= nr < h and 0 <= nc < w) or not passable[nr, nc]:
                continue
            if status[nr, nc] == 2:
                continue
            cand = g[v] + cost[nr, nc]
            if cand < g[nr, nc]:
                g[nr, nc] = cand
                parents[nr, nc] = idx
                status[nr, nc] = 1
                heapq.heappush(heap, (priority(cand, heur[nr, nc]), nr * w + nc, cand))
    raise Unreachable(f"goal {inst.goal} not reachable from {inst.start}")


def best_first(inst: ProblemInstance, cost: np.ndarray | None = None) -> SearchResult:
    """Greedy best-first search: pure-heuristic priority (``h_weight=1``)."""
    return astar_classical(inst, cost=cost, h_weight=1.0)


def dijkstra_shortest_path(inst: ProblemInstance) -> SearchResult:
    """Uniform-cost search; returns one shortest path, deterministic ties."""
    return astar_classical(inst, cost=None, h_weight=0.0)


def dijkstra_field(grid: GridMap, goal: Node) -> np.ndarray:
    """Exact step-count distance from every cell to ``goal``.

    Unit step costs make this plain breadth-first search. Unreachable or
    impassable cells hold ``UNREACHABLE_COST``. Serves as the independent
    optimality oracle for the heap planners.
    """
    if grid.kind != "binary":
        raise ValueError("distance fields need a binary map")
    h, w = grid.shape
    passable = grid.binary
    if not passable[goal]:
        raise ValueError(f"goal {goal} is an obstacle")
    dist = np.full((h, w), UNREACHABLE_COST, dtype=np.float64)
    dist[goal] = 0.0
    q: deque[Node] = deque([goal])
    while q:
        r, c = q.popleft()
        d = dist[r, c] + 1.0
        for dr, dc in NEIGHBOR_OFFSETS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and passable[nr, nc] and dist[nr, nc] == UNREACHABLE_COST:
                dist[nr, nc] = d
                q.append((nr, nc))
    return dist
