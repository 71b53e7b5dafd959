"""Evaluation metrics and their aggregation.

Per instance: success, optimality, and the search-reduction ratio
``max(100*(E*-E)/E*, 0)`` where E* is vanilla A*'s explored count on the
same instance. Per map: percentage optimal, mean reduction, and their
harmonic mean. Across maps: bootstrap means with 95% percentile intervals.
The aggregation order is fixed: instances -> map scores -> bootstrap over
maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPath, Unreachable
from .grid import ProblemInstance, path_is_valid
from .planners import astar_classical


@dataclass
class InstanceScore:
    id: str
    map_id: int
    success: bool
    optimal: bool
    path_steps: int | None
    opt_steps: int
    explored: int | None
    explored_star: int
    exp_ratio: float
    path_ratio: float
    chamfer: float | None = None


@dataclass
class MapScore:
    map_id: int
    n_instances: int
    suc: float
    opt: float
    exp: float
    hmean: float
    path_ratio: float
    chamfer: float | None = None


@dataclass
class BootstrapSummary:
    mean: float
    lo95: float
    hi95: float
    b: int
    seed: int


@dataclass
class EvalReport:
    instances: list[InstanceScore]
    maps: list[MapScore]
    summaries: dict[str, BootstrapSummary] = field(default_factory=dict)

    def map_means(self) -> dict[str, float]:
        out = {}
        for key in ("suc", "opt", "exp", "hmean", "path_ratio"):
            out[key] = float(np.mean([getattr(m, key) for m in self.maps]))
        if self.maps and self.maps[0].chamfer is not None:
            out["chamfer"] = float(np.mean([m.chamfer for m in self.maps]))
        return out


def exp_ratio(explored: int, explored_star: int) -> float:
    """Search reduction vs vanilla A*, clamped at zero."""
    if explored_star < 1:
        raise ValueError("explored_star must be at least 1")
    return max(100.0 * (explored_star - explored) / explored_star, 0.0)


def hmean_pair(opt: float, exp: float) -> float:
    if opt == 0.0 and exp == 0.0:
        return 0.0
    return 2.0 * opt * exp / (opt + exp)


def path_length_ratio(opt_steps: int, path_steps: int) -> float:
    """Optimal step count over achieved step count, in percent."""
    if path_steps <= 0:
        raise ValueError("path must contain at least one step")
    return 100.0 * opt_steps / path_steps


def chamfer(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptyPath("chamfer distance needs non-empty point sets")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    d = np.sqrt(d2)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def bootstrap(values, b: int = 1000, seed: int = 0) -> BootstrapSummary:
    """Mean of ``b`` resample means plus percentile 95% bounds."""
    if b < 100:
        raise ValueError(f"need at least 100 resamples, got {b}")
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("nothing to bootstrap")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, vals.size, size=(b, vals.size))
    means = vals[idx].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return BootstrapSummary(float(means.mean()), float(lo), float(hi), b, seed)


def opt_steps_of(inst: ProblemInstance) -> int:
    """Optimal step count read off the instance's reference path mask."""
    if inst.gt_path is None:
        raise ValueError("instance has no reference path")
    return int(inst.gt_path.sum()) - 1


def evaluate(
    planner,
    items,
    *,
    bootstrap_b: int = 1000,
    seed: int = 0,
    with_chamfer: bool = False,
    explored_star: dict[str, int] | None = None,
) -> EvalReport:
    """Score ``planner`` on dataset items and aggregate.

    ``items`` need ``.id``, ``.map_id``, and ``.inst`` (with a reference
    path). ``planner(inst)`` returns a search result or raises
    ``Unreachable``. ``bootstrap_b=0`` skips the bootstrap summaries (used
    by the training loop's per-epoch validation); any other value must be
    a legal resample count. ``explored_star`` optionally pre-supplies the
    vanilla A* explored counts keyed by item id.
    """
    scores: list[InstanceScore] = []
    for item in items:
        inst = item.inst
        opt_steps = opt_steps_of(inst)
        if explored_star is not None and item.id in explored_star:
            e_star = explored_star[item.id]
        else:
            e_star = vanilla_explored(inst)
        try:
            res = planner(inst)
        except Unreachable:
            res = None
        success = res is not None and path_is_valid(res.path, inst)
        path_steps = len(res.path) - 1 if success else None
        optimal = success and path_steps == opt_steps
        explored = res.explored_count if res is not None else None
        er = exp_ratio(explored, e_star) if explored is not None else 0.0
        pr = path_length_ratio(opt_steps, path_steps) if success else 0.0
        ch = None
        if with_chamfer:
            gt_pts = np.argwhere(inst.gt_path == 1)
            ch = chamfer(np.asarray(res.path), gt_pts) if success else float("inf")
        scores.append(
            InstanceScore(
                id=item.id,
                map_id=item.map_id,
                success=success,
                optimal=optimal,
                path_steps=path_steps,
                opt_steps=opt_steps,
                explored=explored,
                explored_star=e_star,
                exp_ratio=er,
                path_ratio=pr,
                chamfer=ch,
            )
        )

    maps: list[MapScore] = []
    for map_id in sorted({s.map_id for s in scores}):
        group = [s for s in scores if s.map_id == map_id]
        opt = 100.0 * float(np.mean([s.optimal for s in group]))
        exp = float(np.mean([s.exp_ratio for s in group]))
        maps.append(
            MapScore(
                map_id=map_id,
                n_instances=len(group),
                suc=100.0 * float(np.mean([s.success for s in group])),
                opt=opt,
                exp=exp,
                hmean=hmean_pair(opt, exp),
                path_ratio=float(np.mean([s.path_ratio for s in group])),
                chamfer=float(np.mean([s.chamfer for s in group])) if with_chamfer else None,
            )
        )

    summaries: dict[str, BootstrapSummary] = {}
    if bootstrap_b:
        keys = ["suc", "opt", "exp", "hmean", "path_ratio"]
        for i, key in enumerate(keys):
            vals = [getattr(m, key) for m in maps]
            summaries[key] = bootstrap(vals, b=bootstrap_b, seed=seed + i)
        if with_chamfer:
            # trajectory similarity is resampled across instances, not maps
            vals = [s.chamfer for s in scores]
            summaries["chamfer"] = bootstrap(vals, b=bootstrap_b, seed=seed + len(keys))
    return EvalReport(scores, maps, summaries)


def vanilla_explored(inst: ProblemInstance) -> int:
    """Explored count of plain A* with unit costs; the reduction baseline."""
    return astar_classical(inst).explored_count
