"""Grid world primitives: maps, problem instances, neighborhoods, heuristics.

Conventions used throughout the package:

* cells are ``(row, col)`` tuples, row-major linear index = ``row * W + col``
* node masks are ``(H, W)`` uint8 arrays with values in {0, 1}
* scalar fields are ``(H, W)`` float64 arrays
* binary occupancy uses 1 = passable, 0 = obstacle
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

Node = tuple[int, int]

# Sentinel distance for unreachable cells in classical planners. Kept finite
# so integer casts and comparisons stay well defined; no real path cost can
# ever reach it.
UNREACHABLE_COST = np.finfo(np.float64).max

# 8-connected neighborhood offsets in row-major scan order.
NEIGHBOR_OFFSETS: tuple[Node, ...] = (
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 1),
    (1, -1), (1, 0), (1, 1),
)


@dataclass(frozen=True)
class GridMap:
    """A 2D map, either a binary occupancy grid or an RGB image.

    Exactly one of ``binary`` / ``image`` is set. Binary maps know which
    cells are passable; image maps hide traversability inside appearance.
    """

    binary: np.ndarray | None = None
    image: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.binary is None) == (self.image is None):
            raise ValueError("exactly one of binary/image must be given")
        if self.binary is not None:
            arr = np.asarray(self.binary, dtype=np.uint8)
            if arr.ndim != 2:
                raise ShapeMismatch(f"binary map must be 2D, got {arr.shape}")
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("binary map values must be 0 or 1")
            object.__setattr__(self, "binary", arr)
        else:
            arr = np.asarray(self.image, dtype=np.float64)
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise ShapeMismatch(f"image map must be (H, W, 3), got {arr.shape}")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("image values must lie in [0, 1]")
            object.__setattr__(self, "image", arr)

    @property
    def kind(self) -> str:
        return "binary" if self.binary is not None else "image"

    @property
    def shape(self) -> tuple[int, int]:
        arr = self.binary if self.binary is not None else self.image
        return arr.shape[0], arr.shape[1]

    @property
    def height(self) -> int:
        return self.shape[0]

    @property
    def width(self) -> int:
        return self.shape[1]

    def passable_mask(self) -> np.ndarray:
        """uint8 mask of traversable cells; all-ones for image maps."""
        if self.binary is not None:
            return self.binary
        return np.ones(self.shape, dtype=np.uint8)


def _in_bounds(v: Node, shape: tuple[int, int]) -> bool:
    return 0 <= v[0] < shape[0] and 0 <= v[1] < shape[1]


@dataclass(frozen=True)
class ProblemInstance:
    """A planning problem: map, endpoints, and (optionally) a reference path."""

    grid: GridMap
    start: Node
    goal: Node
    gt_path: np.ndarray | None = None

    def __post_init__(self) -> None:
        shape = self.grid.shape
        start = (int(self.start[0]), int(self.start[1]))
        goal = (int(self.goal[0]), int(self.goal[1]))
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "goal", goal)
        for name, v in (("start", start), ("goal", goal)):
            if not _in_bounds(v, shape):
                raise ValueError(f"{name} {v} outside map of shape {shape}")
        if start == goal:
            raise ValueError("start and goal must differ")
        passable = self.grid.passable_mask()
        if not passable[start]:
            raise ValueError(f"start {start} is an obstacle")
        if not passable[goal]:
            raise ValueError(f"goal {goal} is an obstacle")
        if self.gt_path is not None:
            gt = np.asarray(self.gt_path, dtype=np.uint8)
            if gt.shape != shape:
                raise ShapeMismatch("gt_path shape differs from map shape")
            if not gt[start] or not gt[goal]:
                raise ValueError("gt_path must contain start and goal")
            object.__setattr__(self, "gt_path", gt)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


def neighbors8(v: Node, grid: GridMap) -> list[Node]:
    """In-bounds passable 8-neighbors of ``v`` in row-major scan order."""
    h, w = grid.shape
    passable = grid.passable_mask()
    out: list[Node] = []
    for dr, dc in NEIGHBOR_OFFSETS:
        r, c = v[0] + dr, v[1] + dc
        if 0 <= r < h and 0 <= c < w and passable[r, c]:
            out.append((r, c))
    return out


def heuristic_field(grid: GridMap, goal: Node, euclid_coef: float = 0.001) -> np.ndarray:
    """Chebyshev distance to goal plus a small Euclidean tie-breaker.

    The Chebyshev term is a lower bound on the 8-connected step count; the
    Euclidean term orders ties toward geometrically direct cells.
    """
    h, w = grid.shape
    dr = np.abs(np.arange(h, dtype=np.float64)[:, None] - goal[0])
    dc = np.abs(np.arange(w, dtype=np.float64)[None, :] - goal[1])
    cheb = np.maximum(dr, dc)
    eucl = np.sqrt(dr * dr + dc * dc)
    return cheb + euclid_coef * eucl


def onehot_mask(v: Node, shape: tuple[int, int], dtype=np.float64) -> np.ndarray:
    out = np.zeros(shape, dtype=dtype)
    out[v] = 1
    return out


def path_mask(path: list[Node], shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape, dtype=np.uint8)
    for v in path:
        out[v] = 1
    return out


def path_is_valid(path: list[Node], inst: ProblemInstance) -> bool:
    """True iff ``path`` runs start to goal over passable, 8-connected steps."""
    if not path or path[0] != inst.start or path[-1] != inst.goal:
        return False
    passable = inst.grid.passable_mask()
    shape = inst.grid.shape
    for v in path:
        if not _in_bounds(v, shape) or not passable[v]:
            return False
    for a, b in zip(path, path[1:]):
        if a == b or max(abs(a[0] - b[0]), abs(a[1] - b[1])) != 1:
            return False
    return True


def mask_connected_path(mask: np.ndarray, start: Node, goal: Node) -> bool:
    """True iff every set cell of ``mask`` is 8-connected to ``start`` and the
    component contains ``goal``. Used to sanity-check reference paths."""
    mask = np.asarray(mask)
    if not mask[start]:
        return False
    seen = np.zeros_like(mask, dtype=bool)
    stack = [start]
    seen[start] = True
    h, w = mask.shape
    while stack:
        r, c = stack.pop()
        for dr, dc in NEIGHBOR_OFFSETS:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                stack.append((nr, nc))
    if not seen[goal]:
        return False
    return bool((seen == mask.astype(bool)).all())
