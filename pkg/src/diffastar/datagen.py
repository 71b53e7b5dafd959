"""Synthetic dataset generation for grid planners.

Produces obstacle maps (scattered rectangles, recursive-division mazes,
or 2x2 tilings of either), samples goals from corner regions and starts
from cost-percentile bands of the Dijkstra field, labels every instance
with an optimal path, and optionally renders maps as RGB images whose
traversability is hidden in appearance.

Directory layout written by :func:`generate_dataset`:

* ``maps/NNNNNN.pgm`` (binary, P5) or ``maps/NNNNNN.ppm`` (image, P6)
* ``instances.jsonl`` — one object per line:
  ``{"id", "map", "start", "goal", "gt_path", "split", "band"}``
* ``meta.json`` — generation parameters, seed scheme, and flags

Determinism: the RNG for map ``i`` of a split is seeded with
``SeedSequence([seed, split_id, i, attempt])``, so the same parameters
regenerate a bit-identical directory, and splits can never share a seed
stream. Identical map content across splits is additionally rejected by
a content-hash check.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import pnm
from .errors import EmptyBand, NoValidGoal, ShapeMismatch, Unreachable
from .grid import UNREACHABLE_COST, GridMap, Node, ProblemInstance, path_mask
from .planners import dijkstra_field, dijkstra_shortest_path

STYLE_RANDOM_BLOCKS = "random_blocks"
STYLE_MAZE = "maze"
STYLE_TILED = "tiled"
STYLES = (STYLE_RANDOM_BLOCKS, STYLE_MAZE, STYLE_TILED)

SPLITS = ("train", "val", "test")
SPLIT_IDS = {"train": 0, "val": 1, "test": 2}
BAND_NONE = "none"
BANDS = ("b55", "b70", "b85")

# Per-band start counts; train draws a single start anywhere above p55.
STARTS_TRAIN = 1
STARTS_VAL_PER_BAND = 2
STARTS_TEST_PER_BAND = 5

MAX_GOAL_ATTEMPTS = 100
MAX_MAP_ATTEMPTS = 100

ROAD_BASE = np.array([0.78, 0.76, 0.72])
OBSTACLE_BASE = np.array([0.18, 0.42, 0.16])
COLOR_JITTER = 0.04
NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to (re)generate one dataset directory."""

    map_size: tuple[int, int]  # (W, H)
    n_train: int
    n_val: int
    n_test: int
    obstacle_style: str = STYLE_RANDOM_BLOCKS
    seed: int = 0
    image_mode: bool = False
    tile_source: "DatasetSpec | None" = None

    def __post_init__(self) -> None:
        w, h = self.map_size
        if w <= 0 or h <= 0:
            raise ValueError(f"map_size must be positive, got {self.map_size}")
        object.__setattr__(self, "map_size", (int(w), int(h)))
        if self.obstacle_style not in STYLES:
            raise ValueError(f"unknown obstacle style {self.obstacle_style!r}")
        for field in ("n_train", "n_val", "n_test"):
            if getattr(self, field) < 0:
                raise ValueError(f"{field} must be >= 0")
        if self.obstacle_style == STYLE_TILED:
            if self.tile_source is None:
                raise ValueError("tiled style requires tile_source")
            if w % 2 or h % 2:
                raise ValueError("tiled style needs even map dims")
            if self.tile_source.map_size != (w // 2, h // 2):
                raise ValueError(
                    f"tile_source map_size {self.tile_source.map_size} must be "
                    f"half of {self.map_size}"
                )
        elif self.tile_source is not None:
            raise ValueError("tile_source only makes sense with the tiled style")

    def to_dict(self) -> dict:
        d = {
            "map_size": list(self.map_size),
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "obstacle_style": self.obstacle_style,
            "seed": self.seed,
            "image_mode": self.image_mode,
        }
        if self.tile_source is not None:
            d["tile_source"] = self.tile_source.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "DatasetSpec":
        tile = d.get("tile_source")
        return DatasetSpec(
            map_size=tuple(d["map_size"]),
            n_train=d["n_train"],
            n_val=d["n_val"],
            n_test=d["n_test"],
            obstacle_style=d["obstacle_style"],
            seed=d["seed"],
            image_mode=d.get("image_mode", False),
            tile_source=DatasetSpec.from_dict(tile) if tile else None,
        )


@dataclass(frozen=True)
class PercentileBands:
    """Cost thresholds splitting the reachable region by distance to goal."""

    p55: float
    p70: float
    p85: float
    pmax: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.p55 <= self.p70 <= self.p85 <= self.pmax):
            raise ValueError(f"band thresholds out of order: {self}")

    def band_of(self, cost: float) -> str | None:
        """Band label for a cost; left-inclusive edges, top band closed."""
        if self.p55 <= cost < self.p70:
            return "b55"
        if self.p70 <= cost < self.p85:
            return "b70"
        if self.p85 <= cost <= self.pmax:
            return "b85"
        return None


@dataclass(frozen=True)
class SampleResult:
    goal: Node
    starts: tuple[tuple[Node, str], ...]  # ((row, col), band label)
    bands: PercentileBands | None
    with_replacement: bool


@dataclass(frozen=True)
class DatasetItem:
    """One loaded planning problem plus its bookkeeping fields."""

    id: int
    map_id: str
    split: str
    band: str
    inst: ProblemInstance


def _random_blocks(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Scatter axis-aligned rectangles until 20-30% of cells are blocked."""
    target = int(round(rng.uniform(0.20, 0.30) * h * w))
    obstacles = np.zeros((h, w), dtype=np.uint8)
    max_side = max(2, min(h, w) // 4)
    for _ in range(10_000):
        if int(obstacles.sum()) >= target:
            break
        bh = int(rng.integers(2, max_side + 1))
        bw = int(rng.integers(2, max_side + 1))
        r = int(rng.integers(0, h - bh + 1)) if h > bh else 0
        c = int(rng.integers(0, w - bw + 1)) if w > bw else 0
        obstacles[r : r + bh, c : c + bw] = 1
    return 1 - obstacles


def _divide(obstacles: np.ndarray, r0: int, r1: int, c0: int, c1: int,
            rng: np.random.Generator) -> None:
    """Recursive division with parity-locked walls and gaps.

    Walls sit at odd offsets from the chamber origin, gaps at even
    offsets. Chamber origins keep the parity of the map origin, so no
    later wall can ever land on a gap's row/column — which keeps the
    passable cells one connected component.
    """
    h, w = r1 - r0, c1 - c0
    if h < 3 and w < 3:
        return
    if h >= 3 and (w < 3 or h > w or (h == w and rng.random() < 0.5)):
        wall = int(rng.choice(np.arange(r0 + 1, r1 - 1, 2)))
        gap = int(rng.choice(np.arange(c0, c1, 2)))
        obstacles[wall, c0:c1] = 1
        obstacles[wall, gap] = 0
        _divide(obstacles, r0, wall, c0, c1, rng)
        _divide(obstacles, wall + 1, r1, c0, c1, rng)
    else:
        wall = int(rng.choice(np.arange(c0 + 1, c1 - 1, 2)))
        gap = int(rng.choice(np.arange(r0, r1, 2)))
        obstacles[r0:r1, wall] = 1
        obstacles[gap, wall] = 0
        _divide(obstacles, r0, r1, c0, wall, rng)
        _divide(obstacles, r0, r1, wall + 1, c1, rng)


def _maze(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    obstacles = np.zeros((h, w), dtype=np.uint8)
    _divide(obstacles, 0, h, 0, w, rng)
    return 1 - obstacles


def tile_maps(sources: list[GridMap]) -> GridMap:
    """2x2-tile four equally sized binary maps into one of double dims."""
    if len(sources) != 4:
        raise ShapeMismatch(f"tiling needs exactly 4 maps, got {len(sources)}")
    shapes = {m.shape for m in sources}
    if len(shapes) != 1:
        raise ShapeMismatch(f"tile sizes differ: {sorted(shapes)}")
    tiles = [m.binary for m in sources]
    if any(t is None for t in tiles):
        raise ValueError("only binary maps can be tiled")
    return GridMap(binary=np.block([[tiles[0], tiles[1]], [tiles[2], tiles[3]]]))


def gen_map(style: str, size: tuple[int, int], seed,
            tile_source: DatasetSpec | None = None) -> GridMap:
    """Generate one binary map; ``size`` is (W, H), ``seed`` is an int or
    SeedSequence. Result always has >= 40% passable cells."""
    w, h = size
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    if style == STYLE_RANDOM_BLOCKS:
        cells = _random_blocks(h, w, np.random.default_rng(ss))
    elif style == STYLE_MAZE:
        cells = _maze(h, w, np.random.default_rng(ss))
    elif style == STYLE_TILED:
        if tile_source is None:
            raise ValueError("tiled style requires tile_source")
        children = ss.spawn(4)
        subs = [
            gen_map(tile_source.obstacle_style, tile_source.map_size, child,
                    tile_source.tile_source)
            for child in children
        ]
        cells = tile_maps(subs).binary
    else:
        raise ValueError(f"unknown obstacle style {style!r}")
    grid = GridMap(binary=cells)
    passable = float(grid.binary.mean())
    if passable < 0.40:
        raise AssertionError(f"{style} map only {passable:.0%} passable")
    return grid


def render_image(mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Render a hidden occupancy mask as an (H, W, 3) float image.

    Passable cells get a light 'road' color family with additive noise;
    obstacles get a distinct dark family with multiplicative texture.
    The mask itself is not recoverable by thresholding a single channel.
    """
    h, w = mask.shape
    road = ROAD_BASE + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
    obstacle = OBSTACLE_BASE + rng.uniform(-COLOR_JITTER, COLOR_JITTER, size=3)
    img = np.where(mask[..., None] == 1, road, obstacle)
    texture = rng.uniform(0.85, 1.15, size=(h, w, 1))
    img = np.where(mask[..., None] == 1, img, img * texture)
    img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _corner_regions(shape: tuple[int, int]) -> list[tuple[slice, slice]]:
    h, w = shape
    rh, rw = max(1, h // 4), max(1, w // 4)
    return [
        (slice(0, rh), slice(0, rw)),
        (slice(0, rh), slice(w - rw, w)),
        (slice(h - rh, h), slice(0, rw)),
        (slice(h - rh, h), slice(w - rw, w)),
    ]


def compute_bands(dist: np.ndarray) -> PercentileBands | None:
    """Percentile thresholds of the finite, nonzero cost-to-goal values."""
    vals = dist[(dist > 0) & (dist != UNREACHABLE_COST)]
    if vals.size == 0:
        return None
    p55, p70, p85 = (float(np.percentile(vals, q)) for q in (55, 70, 85))
    return PercentileBands(p55, p70, p85, float(vals.max()))


def sample_goal_and_starts(grid: GridMap, split: str, seed) -> SampleResult:
    """Sample a corner-region goal and percentile-banded starts.

    Train draws one start with cost >= p55 (band label "none"); val and
    test draw 2 / 5 starts per band [p55,p70), [p70,p85), [p85,max].
    Bands short of cells fall back to sampling with replacement (flagged
    in the result). The goal is resampled up to 100 times before raising
    EmptyBand.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    mask = grid.binary if grid.binary is not None else grid.passable_mask()
    rng = np.random.default_rng(seed)
    regions = _corner_regions(grid.shape)
    region_cells = []
    for rows, cols in regions:
        sub = np.argwhere(mask[rows, cols] == 1)
        sub = sub + np.array([rows.start, cols.start])
        region_cells.append(sub)
    if all(len(c) == 0 for c in region_cells):
        raise NoValidGoal("no corner region has a passable cell")

    per_band = {"train": 0, "val": STARTS_VAL_PER_BAND, "test": STARTS_TEST_PER_BAND}[split]
    for _ in range(MAX_GOAL_ATTEMPTS):
        # pick a corner at random, skipping empty ones
        order = rng.permutation(4)
        cells = next(region_cells[i] for i in order if len(region_cells[i]))
        goal = tuple(int(v) for v in cells[rng.integers(len(cells))])
        dist = dijkstra_field(grid, goal)
        bands = compute_bands(dist)
        if bands is None:
            continue
        reach = np.argwhere((dist > 0) & (dist != UNREACHABLE_COST))
        costs = dist[reach[:, 0], reach[:, 1]]

        if split == "train":
            pool = reach[costs >= bands.p55]
            if len(pool) == 0:
                continue
            pick = pool[rng.integers(len(pool))]
            starts = ((tuple(int(v) for v in pick), BAND_NONE),)
            return SampleResult(goal, starts, bands, False)

        chosen: list[tuple[Node, str]] = []
        replacement = False
        ok = True
        labels = np.array([bands.band_of(c) for c in costs], dtype=object)
        for band in BANDS:
            pool = reach[labels == band]
            if len(pool) == 0:
                ok = False
                break
            if len(pool) < per_band:
                idx = rng.integers(0, len(pool), size=per_band)
                replacement = True
            else:
                idx = rng.choice(len(pool), size=per_band, replace=False)
            chosen.extend((tuple(int(v) for v in pool[i]), band) for i in idx)
        if ok:
            return SampleResult(goal, tuple(chosen), bands, replacement)
    raise EmptyBand(f"no goal with populated bands after {MAX_GOAL_ATTEMPTS} tries")


def label_instance(inst: ProblemInstance) -> ProblemInstance:
    """Attach an optimal-path mask computed by the exact planner."""
    res = dijkstra_shortest_path(inst)
    return dataclasses.replace(inst, gt_path=path_mask(res.path, inst.grid.shape))


def _map_seed(spec: DatasetSpec, split: str, index: int, attempt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([spec.seed, SPLIT_IDS[split], index, attempt])


def _gen_one_map(spec: DatasetSpec, split: str, index: int, attempt: int):
    """Returns (planning grid, stored grid, hash of planning content, sampling/render children)."""
    ss = _map_seed(spec, split, index, attempt)
    map_ss, sample_ss, render_ss = ss.spawn(3)
    hidden = gen_map(spec.obstacle_style, spec.map_size, map_ss, spec.tile_source)
    digest = hashlib.sha256(hidden.binary.tobytes()).hexdigest()
    if spec.image_mode:
        img = render_image(hidden.binary, np.random.default_rng(render_ss))
        # round-trip through uint8 so instances match the stored file exactly
        stored = GridMap(image=np.round(img * 255.0).astype(np.uint8) / 255.0)
    else:
        stored = hidden
    return hidden, stored, digest, sample_ss


def generate_dataset(spec: DatasetSpec, out_dir: str) -> dict:
    """Write a complete dataset directory; returns summary counts."""
    maps_dir = os.path.join(out_dir, "maps")
    os.makedirs(maps_dir, exist_ok=True)
    ext = ".ppm" if spec.image_mode else ".pgm"

    lines: list[str] = []
    hash_split: dict[str, str] = {}
    replacement_ids: list[int] = []
    per_split = {s: 0 for s in SPLITS}
    map_no = 0
    inst_id = 0

    for split, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        for index in range(count):
            for attempt in range(MAX_MAP_ATTEMPTS):
                hidden, stored, digest, sample_ss = _gen_one_map(spec, split, index, attempt)
                owner = hash_split.setdefault(digest, split)
                if owner != split:
                    continue  # identical map already emitted in another split
                try:
                    sample = sample_goal_and_starts(hidden, split, sample_ss)
                except (NoValidGoal, EmptyBand):
                    continue
                break
            else:
                raise EmptyBand(
                    f"{split} map {index}: no usable map in {MAX_MAP_ATTEMPTS} attempts"
                )

            map_no += 1
            rel = f"maps/{map_no:06d}{ext}"
            pnm.save_map(os.path.join(out_dir, rel), stored)
            dist = dijkstra_field(hidden, sample.goal)
            for start, band in sample.starts:
                res = dijkstra_shortest_path(
                    ProblemInstance(grid=hidden, start=start, goal=sample.goal)
                )
                if len(res.path) - 1 != int(dist[start]):
                    raise Unreachable(
                        f"labeling bug: path steps {len(res.path) - 1} != "
                        f"field cost {dist[start]} at {start}"
                    )
                inst_id += 1
                per_split[split] += 1
                if sample.with_replacement:
                    replacement_ids.append(inst_id)
                lines.append(json.dumps({
                    "id": inst_id,
                    "map": rel,
                    "start": [int(start[0]), int(start[1])],
                    "goal": [int(sample.goal[0]), int(sample.goal[1])],
                    "gt_path": [[int(r), int(c)] for r, c in res.path],
                    "split": split,
                    "band": band,
                }, separators=(",", ":")))

    pnm.atomic_write_text(os.path.join(out_dir, "instances.jsonl"),
                          "\n".join(lines) + "\n")
    meta = {
        "format": 1,
        "spec": spec.to_dict(),
        "seed_scheme": "SeedSequence([seed, split_id, map_index, attempt])",
        "map_hash": "sha256 of the occupancy mask, rejected across splits",
        "replacement_ids": replacement_ids,
        "n_maps": map_no,
        "n_instances": inst_id,
        "per_split": per_split,
    }
    pnm.atomic_write_text(os.path.join(out_dir, "meta.json"),
                          json.dumps(meta, indent=2) + "\n")
    return {"n_maps": map_no, "n_instances": inst_id, "per_split": per_split}


def load_meta(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "meta.json"), encoding="utf-8") as fh:
        return json.load(fh)


def load_dataset(out_dir: str, split: str | None = None) -> list[DatasetItem]:
    """Read a dataset directory back into validated items."""
    items: list[DatasetItem] = []
    grids: dict[str, GridMap] = {}
    seen_ids: set[int] = set()
    with open(os.path.join(out_dir, "instances.jsonl"), encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row["split"] not in SPLITS:
                raise ValueError(f"line {line_no}: bad split {row['split']!r}")
            if row["band"] not in (BAND_NONE,) + BANDS:
                raise ValueError(f"line {line_no}: bad band {row['band']!r}")
            if row["id"] in seen_ids:
                raise ValueError(f"line {line_no}: duplicate id {row['id']}")
            seen_ids.add(row["id"])
            if split is not None and row["split"] != split:
                continue
            rel = row["map"]
            if rel not in grids:
                grids[rel] = pnm.load_map(os.path.join(out_dir, rel))
            grid = grids[rel]
            gt = path_mask([tuple(p) for p in row["gt_path"]], grid.shape)
            inst = ProblemInstance(
                grid=grid,
                start=tuple(row["start"]),
                goal=tuple(row["goal"]),
                gt_path=gt,
            )
            items.append(DatasetItem(
                id=int(row["id"]), map_id=rel, split=row["split"],
                band=row["band"], inst=inst,
            ))
    return items
