import json
import os

import numpy as np
import pytest

from diffastar import datagen, pnm
from diffastar.datagen import (
    BANDS,
    DatasetSpec,
    PercentileBands,
    compute_bands,
    gen_map,
    generate_dataset,
    label_instance,
    load_dataset,
    render_image,
    sample_goal_and_starts,
    tile_maps,
)
from diffastar.errors import EmptyBand, NoValidGoal, ShapeMismatch, Unreachable
from diffastar.grid import UNREACHABLE_COST, GridMap, ProblemInstance
from diffastar.planners import dijkstra_field


def spec_small(**kw):
    defaults = dict(map_size=(16, 16), n_train=3, n_val=1, n_test=1, seed=7)
    defaults.update(kw)
    return DatasetSpec(**defaults)


# ---------------------------------------------------------------- spec type


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(map_size=(0, 8), n_train=1, n_val=1, n_test=1)
    with pytest.raises(ValueError):
        DatasetSpec(map_size=(8, 8), n_train=-1, n_val=1, n_test=1)
    with pytest.raises(ValueError):
        DatasetSpec(map_size=(8, 8), n_train=1, n_val=1, n_test=1, obstacle_style="blobs")
    with pytest.raises(ValueError):
        DatasetSpec(map_size=(8, 8), n_train=1, n_val=1, n_test=1, obstacle_style="tiled")
    with pytest.raises(ValueError):  # tile size must be half
        DatasetSpec(
            map_size=(8, 8), n_train=1, n_val=1, n_test=1, obstacle_style="tiled",
            tile_source=spec_small(map_size=(8, 8)),
        )
    with pytest.raises(ValueError):  # tile_source without tiled style
        spec_small(tile_source=spec_small(map_size=(8, 8)))


def test_spec_dict_roundtrip():
    tiled = DatasetSpec(
        map_size=(16, 16), n_train=2, n_val=1, n_test=1, obstacle_style="tiled",
        seed=3, tile_source=spec_small(map_size=(8, 8), obstacle_style="maze"),
    )
    assert DatasetSpec.from_dict(tiled.to_dict()) == tiled
    assert DatasetSpec.from_dict(json.loads(json.dumps(tiled.to_dict()))) == tiled


# ---------------------------------------------------------------- gen_map


@pytest.mark.parametrize("style", ["random_blocks", "maze"])
def test_gen_map_deterministic(style):
    a = gen_map(style, (32, 32), 5)
    b = gen_map(style, (32, 32), 5)
    np.testing.assert_array_equal(a.binary, b.binary)
    c = gen_map(style, (32, 32), 6)
    assert not np.array_equal(a.binary, c.binary)


@pytest.mark.parametrize("style", ["random_blocks", "maze"])
def test_gen_map_occupancy_bounds(style):
    # Monte-Carlo bound check: obstacle fraction stays in [0.1, 0.6]
    for seed in range(200):
        grid = gen_map(style, (32, 32), seed)
        occ = 1.0 - grid.binary.mean()
        assert 0.1 <= occ <= 0.6, f"seed {seed}: occupancy {occ:.2f}"
        assert grid.binary.mean() >= 0.4


@pytest.mark.parametrize("size", [(32, 32), (31, 33), (16, 48)])
def test_maze_single_component(size):
    for seed in range(20):
        grid = gen_map("maze", size, seed)
        cells = np.argwhere(grid.binary == 1)
        dist = dijkstra_field(grid, tuple(cells[0]))
        reached = dist[cells[:, 0], cells[:, 1]] != UNREACHABLE_COST
        assert reached.all(), f"seed {seed}: maze is disconnected"


def test_gen_map_rectangular():
    grid = gen_map("random_blocks", (48, 16), 0)  # (W, H)
    assert grid.shape == (16, 48)


def test_tile_maps():
    quads = [GridMap(binary=np.full((4, 4), v, np.uint8)) for v in (1, 0, 0, 1)]
    tiled = tile_maps(quads)
    assert tiled.shape == (8, 8)
    np.testing.assert_array_equal(tiled.binary[:4, :4], 1)
    np.testing.assert_array_equal(tiled.binary[:4, 4:], 0)
    np.testing.assert_array_equal(tiled.binary[4:, :4], 0)
    np.testing.assert_array_equal(tiled.binary[4:, 4:], 1)
    with pytest.raises(ShapeMismatch):
        tile_maps(quads[:3])
    with pytest.raises(ShapeMismatch):
        tile_maps(quads[:3] + [GridMap(binary=np.ones((3, 4), np.uint8))])


def test_gen_map_tiled_style():
    sub = DatasetSpec(map_size=(8, 8), n_train=1, n_val=0, n_test=0,
                      obstacle_style="random_blocks")
    a = gen_map("tiled", (16, 16), 9, tile_source=sub)
    b = gen_map("tiled", (16, 16), 9, tile_source=sub)
    assert a.shape == (16, 16)
    np.testing.assert_array_equal(a.binary, b.binary)
    with pytest.raises(ValueError):
        gen_map("tiled", (16, 16), 9)


# ---------------------------------------------------------------- bands


def test_band_edges():
    bands = PercentileBands(5.0, 10.0, 20.0, 40.0)
    assert bands.band_of(4.9) is None
    assert bands.band_of(5.0) == "b55"      # left-inclusive
    assert bands.band_of(9.999) == "b55"
    assert bands.band_of(10.0) == "b70"     # right-exclusive below
    assert bands.band_of(19.999) == "b70"
    assert bands.band_of(20.0) == "b85"
    assert bands.band_of(40.0) == "b85"     # top band right-inclusive
    assert bands.band_of(40.001) is None
    with pytest.raises(ValueError):
        PercentileBands(10.0, 5.0, 20.0, 40.0)


def test_compute_bands_matches_percentile_oracle():
    grid = GridMap(binary=np.ones((12, 12), np.uint8))
    dist = dijkstra_field(grid, (0, 0))
    bands = compute_bands(dist)
    vals = dist[dist > 0]
    assert bands.p55 == np.percentile(vals, 55)
    assert bands.p70 == np.percentile(vals, 70)
    assert bands.p85 == np.percentile(vals, 85)
    assert bands.pmax == vals.max()
    assert bands.p55 <= bands.p70 <= bands.p85 <= bands.pmax


def test_compute_bands_unreachable_only():
    grid = GridMap(binary=np.eye(4, dtype=np.uint8))  # isolated diagonal? no: 8-conn
    dist = np.full((4, 4), UNREACHABLE_COST)
    dist[0, 0] = 0.0
    assert compute_bands(dist) is None


# ------------------------------------------------- goal / start sampling


def test_sample_counts_and_membership():
    grid = GridMap(binary=np.ones((32, 32), np.uint8))
    for split, expected in (("train", 1), ("val", 6), ("test", 15)):
        got = sample_goal_and_starts(grid, split, seed=11)
        assert len(got.starts) == expected
        # goal inside a corner region of size (H/4, W/4)
        r, c = got.goal
        assert (r < 8 or r >= 24) and (c < 8 or c >= 24)
        # independent re-check of every band label
        dist = dijkstra_field(grid, got.goal)
        bands = compute_bands(dist)
        for start, band in got.starts:
            cost = dist[start]
            assert cost != UNREACHABLE_COST and cost > 0
            if split == "train":
                assert band == "none"
                assert cost >= bands.p55
            else:
                assert bands.band_of(cost) == band
        if split == "test":
            assert [b for _, b in got.starts].count("b85") == 5


def test_sample_without_replacement_distinct():
    grid = GridMap(binary=np.ones((32, 32), np.uint8))
    got = sample_goal_and_starts(grid, "test", seed=3)
    assert not got.with_replacement
    assert len({s for s, _ in got.starts}) == len(got.starts)


def test_sample_deterministic():
    grid = gen_map("random_blocks", (32, 32), 4)
    a = sample_goal_and_starts(grid, "test", seed=8)
    b = sample_goal_and_starts(grid, "test", seed=8)
    assert a == b


def test_sample_no_valid_goal():
    cells = np.ones((12, 12), np.uint8)
    cells[:3, :3] = cells[:3, -3:] = cells[-3:, :3] = cells[-3:, -3:] = 0
    with pytest.raises(NoValidGoal):
        sample_goal_and_starts(GridMap(binary=cells), "train", seed=0)


def test_sample_empty_band():
    # every reachable cost equals 1: the [p55, p70) band can never fill
    grid = GridMap(binary=np.ones((2, 2), np.uint8))
    with pytest.raises(EmptyBand):
        sample_goal_and_starts(grid, "val", seed=0)


def test_sample_with_replacement_flag():
    # 1x4 corridor: goal at an end, 3 reachable cells -> b85 has < 5 cells
    grid = GridMap(binary=np.ones((1, 8), np.uint8))
    got = sample_goal_and_starts(grid, "test", seed=1)
    assert got.with_replacement
    assert len(got.starts) == 15


# ---------------------------------------------------------------- labeling


def test_label_corridor():
    grid = GridMap(binary=np.ones((1, 5), np.uint8))
    inst = label_instance(ProblemInstance(grid=grid, start=(0, 0), goal=(0, 4)))
    np.testing.assert_array_equal(inst.gt_path, np.ones((1, 5), np.uint8))


def test_label_unreachable():
    cells = np.ones((5, 5), np.uint8)
    cells[:, 2] = 0
    inst = ProblemInstance(grid=GridMap(binary=cells), start=(2, 0), goal=(2, 4))
    with pytest.raises(Unreachable):
        label_instance(inst)


# ---------------------------------------------------------------- images


def test_render_image_contract():
    rng = np.random.default_rng(0)
    mask = (rng.random((24, 24)) > 0.4).astype(np.uint8)
    img = render_image(mask, np.random.default_rng(1))
    assert img.shape == (24, 24, 3)
    assert img.min() >= 0.0 and img.max() <= 1.0
    road = img[mask == 1].mean(axis=0)
    obstacle = img[mask == 0].mean(axis=0)
    assert np.abs(road - obstacle).mean() > 0.3


def test_render_image_deterministic():
    mask = (np.random.default_rng(2).random((16, 16)) > 0.3).astype(np.uint8)
    a = render_image(mask, np.random.default_rng(5))
    b = render_image(mask, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------- dataset end-to-end


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ds"))
    spec = spec_small()
    report = generate_dataset(spec, out)
    return spec, out, report


def test_generate_layout(small_dataset):
    spec, out, report = small_dataset
    assert report["n_maps"] == 5
    assert report["per_split"] == {"train": 3, "val": 6, "test": 15}
    assert sorted(os.listdir(os.path.join(out, "maps"))) == [
        f"{i:06d}.pgm" for i in range(1, 6)
    ]
    meta = datagen.load_meta(out)
    assert DatasetSpec.from_dict(meta["spec"]) == spec
    assert meta["n_instances"] == 24


def test_instances_schema(small_dataset):
    _, out, _ = small_dataset
    with open(os.path.join(out, "instances.jsonl")) as fh:
        rows = [json.loads(line) for line in fh]
    assert [r["id"] for r in rows] == list(range(1, 25))
    for r in rows:
        assert set(r) == {"id", "map", "start", "goal", "gt_path", "split", "band"}
        assert r["map"].startswith("maps/") and r["map"].endswith(".pgm")
        assert (r["band"] == "none") == (r["split"] == "train")
    val_bands = [r["band"] for r in rows if r["split"] == "val"]
    assert sorted(val_bands) == ["b55", "b55", "b70", "b70", "b85", "b85"]


def test_loaded_paths_are_optimal(small_dataset):
    _, out, _ = small_dataset
    items = load_dataset(out)
    assert len(items) == 24
    fields = {}
    for it in items:
        key = (it.map_id, it.inst.goal)
        if key not in fields:
            fields[key] = dijkstra_field(it.inst.grid, it.inst.goal)
        steps = int(it.inst.gt_path.sum()) - 1
        assert steps == int(fields[key][it.inst.start])


def test_load_split_filter(small_dataset):
    _, out, _ = small_dataset
    assert len(load_dataset(out, split="train")) == 3
    assert len(load_dataset(out, split="val")) == 6
    assert {it.split for it in load_dataset(out, split="test")} == {"test"}


def test_no_map_crosses_splits(small_dataset):
    _, out, _ = small_dataset
    items = load_dataset(out)
    owner: dict[bytes, str] = {}
    for it in items:
        key = it.inst.grid.binary.tobytes()
        assert owner.setdefault(key, it.split) == it.split


def test_regeneration_bit_identical(small_dataset, tmp_path):
    spec, out, _ = small_dataset
    again = str(tmp_path / "again")
    generate_dataset(spec, again)
    for root, _, files in os.walk(out):
        for name in files:
            a = os.path.join(root, name)
            b = os.path.join(again, os.path.relpath(a, out))
            with open(a, "rb") as fa, open(b, "rb") as fb:
                assert fa.read() == fb.read(), f"{name} differs between runs"


def test_image_mode_dataset(tmp_path):
    spec = spec_small(n_train=2, n_val=0, n_test=1, image_mode=True, seed=3)
    out = str(tmp_path / "img")
    generate_dataset(spec, out)
    items = load_dataset(out)
    assert len(items) == 17
    assert all(it.inst.grid.kind == "image" for it in items)
    files = sorted(os.listdir(os.path.join(out, "maps")))
    assert all(f.endswith(".ppm") for f in files)
    # reference paths must live on the hidden mask used for rendering
    for split, count in (("train", 2), ("test", 1)):
        for index in range(count):
            for attempt in range(datagen.MAX_MAP_ATTEMPTS):
                hidden, stored, _, _ = datagen._gen_one_map(spec, split, index, attempt)
                path = os.path.join(out, "maps")
                match = [
                    f for f in files
                    if np.array_equal(pnm.load_map(os.path.join(path, f)).image, stored.image)
                ]
                if match:
                    break
            assert match, f"no stored file matches {split} map {index}"
            for it in items:
                if it.map_id == f"maps/{match[0]}":
                    assert hidden.binary[it.inst.gt_path == 1].all()


def test_tiled_dataset(tmp_path):
    spec = DatasetSpec(
        map_size=(16, 16), n_train=1, n_val=1, n_test=1, obstacle_style="tiled",
        seed=2, tile_source=DatasetSpec(map_size=(8, 8), n_train=0, n_val=0,
                                        n_test=0, obstacle_style="random_blocks"),
    )
    out = str(tmp_path / "tiled")
    generate_dataset(spec, out)
    items = load_dataset(out)
    assert all(it.inst.grid.shape == (16, 16) for it in items)
