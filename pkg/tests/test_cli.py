import json
import os

import numpy as np
import pytest

from diffastar import cli, pnm
from diffastar.datagen import load_dataset


def run_cli(*argv) -> int:
    try:
        return cli.main(list(argv))
    except SystemExit as e:  # argparse errors
        return int(e.code)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli_ds"))
    code = run_cli(
        "gen", "--out", out, "--style", "random_blocks", "--size", "16", "16",
        "--n-train", "4", "--n-val", "1", "--n-test", "1", "--seed", "5",
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def ckpt(dataset, tmp_path_factory):
    path = str(tmp_path_factory.mktemp("cli_ck") / "model.nasw")
    code = run_cli(
        "train", "--data", dataset, "--out", path,
        "--epochs", "2", "--batch", "4", "--lr", "0.001", "--seed", "1",
    )
    assert code == 0
    return path


# -------------------------------------------------------------------- gen


def test_gen_writes_dataset(dataset):
    assert os.path.isfile(os.path.join(dataset, "instances.jsonl"))
    assert os.path.isfile(os.path.join(dataset, "meta.json"))
    items = load_dataset(dataset)
    assert len(items) == 4 + 6 + 15


def test_gen_image_mode(tmp_path):
    out = str(tmp_path / "img")
    assert run_cli(
        "gen", "--out", out, "--size", "16", "16", "--n-train", "1",
        "--n-val", "0", "--n-test", "0", "--image-mode",
    ) == 0
    files = os.listdir(os.path.join(out, "maps"))
    assert files and all(f.endswith(".ppm") for f in files)


def test_gen_failure_exit_3(tmp_path):
    # a 2x2 map cannot stay 40% passable once a block lands on it
    assert run_cli(
        "gen", "--out", str(tmp_path / "x"), "--size", "2", "2",
        "--n-train", "1", "--n-val", "0", "--n-test", "0",
    ) == 3


def test_gen_flag_errors():
    assert run_cli("gen") == 2                       # --out missing
    assert run_cli("gen", "--out", "x", "--style", "blobs") == 2
    assert run_cli("gen", "--out", "x", "--bogus") == 2


# ------------------------------------------------------------------ config


def test_config_file_merging(tmp_path):
    out = str(tmp_path / "ds")
    cfg = {"out": out, "size": [16, 16], "n_train": 2, "n_val": 0, "n_test": 0}
    cfg_path = str(tmp_path / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump(cfg, fh)
    # explicit flag beats the config value
    assert run_cli("gen", "--config", cfg_path, "--n-train", "1") == 0
    assert len(load_dataset(out)) == 1


def test_config_unknown_key(tmp_path):
    cfg_path = str(tmp_path / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump({"epochz": 3}, fh)
    assert run_cli("train", "--config", cfg_path, "--data", "x", "--out", "y") == 2


def test_help_exits_zero():
    assert run_cli("--help") == 0
    assert run_cli("plan", "--help") == 0


# ------------------------------------------------------------------- train


def test_train_artifacts(ckpt):
    assert os.path.isfile(ckpt)
    log = ckpt + ".log.csv"
    assert os.path.isfile(log)
    with open(log) as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0].startswith("# optimizer=rmsprop")
    assert lines[1] == "epoch,mean_loss,val_opt,val_exp,val_hmean"
    assert len(lines) == 2 + 2  # comment + header + one row per epoch


def test_train_resume_mismatch(ckpt, tmp_path):
    img = str(tmp_path / "img_ds")
    assert run_cli(
        "gen", "--out", img, "--size", "16", "16", "--n-train", "2",
        "--n-val", "1", "--n-test", "0", "--image-mode",
    ) == 0
    # binary-trained weights cannot resume on an image dataset
    assert run_cli(
        "train", "--data", img, "--out", str(tmp_path / "m.nasw"),
        "--epochs", "1", "--batch", "2", "--resume", ckpt,
    ) == 4


def test_train_missing_dataset(tmp_path):
    assert run_cli(
        "train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m"),
    ) == 2


# -------------------------------------------------------------------- eval


def test_eval_dijkstra_opt_100(dataset, capsys):
    assert run_cli(
        "eval", "--data", dataset, "--planner", "dijkstra", "--bootstrap", "200",
    ) == 0
    capsys.readouterr()
    with open(os.path.join(dataset, "eval_test_dijkstra.json")) as fh:
        doc = json.load(fh)
    assert doc["opt"]["mean"] == 100.0
    assert doc["_meta"]["planner"] == "dijkstra"
    with open(os.path.join(dataset, "eval_test_dijkstra.csv")) as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0] == "map_id,opt,exp,hmean"
    assert len(lines) == 2  # one test map


def test_eval_astar_exp_zero(dataset, tmp_path, capsys):
    prefix = str(tmp_path / "res")
    assert run_cli(
        "eval", "--data", dataset, "--planner", "astar", "--bootstrap", "100",
        "--out", prefix,
    ) == 0
    capsys.readouterr()
    with open(prefix + ".json") as fh:
        doc = json.load(fh)
    assert doc["exp"]["mean"] == 0.0
    assert doc["opt"]["mean"] == 100.0


def test_eval_neural_astar_runs(dataset, ckpt, tmp_path, capsys):
    prefix = str(tmp_path / "na")
    assert run_cli(
        "eval", "--data", dataset, "--planner", "neural-astar", "--ckpt", ckpt,
        "--bootstrap", "100", "--out", prefix,
    ) == 0
    out = capsys.readouterr().out
    assert "hmean" in out
    assert os.path.isfile(prefix + ".json")


def test_eval_planner_ckpt_mismatches(dataset, ckpt):
    assert run_cli("eval", "--data", dataset, "--planner", "neural-astar") == 5
    assert run_cli(
        "eval", "--data", dataset, "--planner", "astar", "--ckpt", ckpt,
    ) == 5
    assert run_cli(
        "eval", "--data", dataset, "--planner", "neural-bf", "--ckpt", ckpt,
    ) == 5  # checkpoint was trained for the other variant


# -------------------------------------------------------------------- plan


@pytest.fixture()
def corridor(tmp_path):
    p = str(tmp_path / "corridor.pgm")
    pnm.write_pgm(p, np.full((1, 5), 255, np.uint8))
    return p


def test_plan_corridor_render(corridor, tmp_path, capsys):
    prefix = str(tmp_path / "out" / "run")
    assert run_cli(
        "plan", "--map", corridor, "--start", "0,0", "--goal", "0,4",
        "--out", prefix,
    ) == 0
    capsys.readouterr()
    with open(prefix + ".path.json") as fh:
        path = json.load(fh)
    assert path == [[0, i] for i in range(5)]
    img = pnm.read_ppm(prefix + ".search.ppm")
    assert img.shape == (1, 5, 3)
    reds = (img == np.array(cli.COLOR_PATH)).all(axis=2).sum()
    blues = (img == np.array(cli.COLOR_ENDPOINT)).all(axis=2).sum()
    assert reds == 3  # interior path cells
    assert blues == 2  # start and goal
    assert not os.path.exists(prefix + ".guidance.ppm")


def test_plan_palette_exact(tmp_path, capsys):
    cells = np.full((3, 5), 255, np.uint8)
    cells[1, 2] = 0
    p = str(tmp_path / "m.pgm")
    pnm.write_pgm(p, cells)
    prefix = str(tmp_path / "r")
    assert run_cli("plan", "--map", p, "--start", "1,0", "--goal", "1,4",
                   "--out", prefix) == 0
    capsys.readouterr()
    img = pnm.read_ppm(prefix + ".search.ppm")
    palette = {tuple(c) for c in img.reshape(-1, 3)}
    allowed = {cli.COLOR_OBSTACLE, cli.COLOR_FREE, cli.COLOR_EXPLORED,
               cli.COLOR_PATH, cli.COLOR_ENDPOINT}
    assert palette <= allowed
    assert tuple(img[1, 2]) == cli.COLOR_OBSTACLE


def test_plan_unreachable_exit_6(tmp_path, capsys):
    cells = np.full((1, 5), 255, np.uint8)
    cells[0, 2] = 0
    p = str(tmp_path / "wall.pgm")
    pnm.write_pgm(p, cells)
    assert run_cli("plan", "--map", p, "--start", "0,0", "--goal", "0,4",
                   "--out", str(tmp_path / "r")) == 6


def test_plan_invalid_cells(corridor, tmp_path):
    out = str(tmp_path / "r")
    assert run_cli("plan", "--map", corridor, "--start", "zz", "--goal", "0,4",
                   "--out", out) == 2
    assert run_cli("plan", "--map", corridor, "--start", "0,9", "--goal", "0,4",
                   "--out", out) == 2


def test_plan_with_guidance(dataset, ckpt, tmp_path, capsys):
    items = load_dataset(dataset, split="test")
    inst = items[0].inst
    map_path = str(tmp_path / "m.pgm")
    pnm.save_map(map_path, inst.grid)
    prefix = str(tmp_path / "g")
    assert run_cli(
        "plan", "--map", map_path,
        "--start", f"{inst.start[0]},{inst.start[1]}",
        "--goal", f"{inst.goal[0]},{inst.goal[1]}",
        "--ckpt", ckpt, "--out", prefix,
    ) == 0
    capsys.readouterr()
    guidance = pnm.read_ppm(prefix + ".guidance.ppm")
    assert guidance.shape == (16, 16, 3)
    # grayscale: all channels agree; some cell renders (near-)white
    assert (guidance[:, :, 0] == guidance[:, :, 1]).all()
    assert (guidance[:, :, 1] == guidance[:, :, 2]).all()
    assert guidance.max() == 255


# ------------------------------------------------------------------- bench


def test_bench_csv(dataset, capsys):
    assert run_cli(
        "bench", "--data", dataset, "--planner", "dijkstra", "--repeat", "1",
    ) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0] == "size,planner,instances,repeat,mean_seconds"
    size, name, n, repeat, mean = out[1].split(",")
    assert size == "16x16" and name == "dijkstra" and int(n) == 15
    assert float(mean) > 0


def test_bench_mismatch_exit_5(dataset):
    assert run_cli("bench", "--data", dataset, "--planner", "neural-astar") == 5
