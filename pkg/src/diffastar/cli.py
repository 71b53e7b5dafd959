"""Command-line surface: dataset generation, training, evaluation,
single-instance planning with renderings, and runtime benchmarks.

Exit codes: 0 success (all written artifacts re-validated), 2 invalid
flags or paths, 3 dataset generation failure, 4 training failure,
5 planner/checkpoint mismatch, 6 no path exists.

Every subcommand accepts ``--config FILE``, a JSON object whose keys
mirror the long flag names with dashes replaced by underscores; values
given explicitly on the command line win over the file. All randomness
flows from ``--seed`` (default 0) — never from the clock.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import encoder as enc
from . import pnm
from .datagen import (
    STYLE_RANDOM_BLOCKS,
    STYLE_TILED,
    STYLES,
    DatasetSpec,
    generate_dataset,
    load_dataset,
    load_meta,
)
from .diff_astar import VARIANT_NEURAL_ASTAR, VARIANT_NEURAL_BF
from .errors import Unreachable
from .grid import GridMap, ProblemInstance
from .metrics import evaluate
from .planners import astar_classical, best_first, dijkstra_shortest_path
from .training import (
    TrainConfig,
    load_checkpoint,
    neural_planner,
    read_log,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_GEN = 3
EXIT_TRAIN = 4
EXIT_PLANNER = 5
EXIT_UNREACHABLE = 6

PLANNERS = ("neural-astar", "neural-bf", "astar", "wastar", "bf", "dijkstra")
NEURAL_PLANNERS = {"neural-astar": VARIANT_NEURAL_ASTAR, "neural-bf": VARIANT_NEURAL_BF}
VARIANTS = {"astar": VARIANT_NEURAL_ASTAR, "bf": VARIANT_NEURAL_BF}

# Exact palette for plan renderings.
COLOR_OBSTACLE = (0, 0, 0)
COLOR_FREE = (255, 255, 255)
COLOR_EXPLORED = (0, 200, 0)
COLOR_PATH = (255, 0, 0)
COLOR_ENDPOINT = (0, 0, 255)

DEFAULTS: dict[str, dict] = {
    "gen": {
        "out": None, "style": STYLE_RANDOM_BLOCKS, "size": [32, 32],
        "n_train": 10, "n_val": 2, "n_test": 2, "seed": 0,
        "image_mode": False, "tile_style": STYLE_RANDOM_BLOCKS,
    },
    "train": {
        "data": None, "out": None, "epochs": 100, "batch": 100,
        "lr": 0.001, "variant": "astar", "seed": 0, "resume": None,
        "warmup": 0,
    },
    "eval": {
        "data": None, "split": "test", "planner": None, "ckpt": None,
        "w": 0.8, "seed": 0, "out": None, "bootstrap": 1000,
    },
    "plan": {"map": None, "start": None, "goal": None, "ckpt": None, "out": None},
    "bench": {
        "data": None, "split": "test", "planner": None, "ckpt": None,
        "w": 0.8, "repeat": 3,
    },
}
REQUIRED: dict[str, tuple[str, ...]] = {
    "gen": ("out",),
    "train": ("data", "out"),
    "eval": ("data", "planner"),
    "plan": ("map", "start", "goal", "out"),
    "bench": ("data", "planner"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="diffastar",
        description="Grid planning with a learned guidance map: generate "
        "datasets, train the encoder, evaluate planners, plan and render "
        "single instances, and benchmark runtimes.",
    )
    sub = p.add_subparsers(dest="cmd", required=True, metavar="COMMAND")

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", metavar="FILE",
                        help="JSON config; explicit flags override its values")

    g = sub.add_parser("gen", help="generate a dataset directory")
    common(g)
    g.add_argument("--out", metavar="DIR", help="output dataset directory")
    g.add_argument("--style", choices=STYLES, help="obstacle generator")
    g.add_argument("--size", nargs=2, type=int, metavar=("W", "H"), help="map size")
    g.add_argument("--n-train", type=int, metavar="N", help="training maps")
    g.add_argument("--n-val", type=int, metavar="N", help="validation maps")
    g.add_argument("--n-test", type=int, metavar="N", help="test maps")
    g.add_argument("--seed", type=int, help="generation seed (default 0)")
    g.add_argument("--image-mode", action="store_const", const=True,
                   help="render maps as RGB images with hidden traversability")
    g.add_argument("--tile-style", choices=("random_blocks", "maze"),
                   help="sub-map style when --style tiled")

    t = sub.add_parser("train", help="train the guidance encoder")
    common(t)
    t.add_argument("--data", metavar="DIR", help="dataset directory")
    t.add_argument("--out", metavar="CKPT", help="checkpoint file to write")
    t.add_argument("--epochs", type=int, help="training epochs")
    t.add_argument("--batch", type=int, help="batch size")
    t.add_argument("--lr", type=float, help="RMSProp learning rate")
    t.add_argument("--variant", choices=sorted(VARIANTS), help="search variant")
    t.add_argument("--seed", type=int, help="training seed (default 0)")
    t.add_argument("--warmup", type=int, metavar="N",
                   help="epochs of direct guidance shaping before search "
                   "training (default 0)")
    t.add_argument("--resume", metavar="CKPT", help="start from these weights")

    e = sub.add_parser("eval", help="evaluate a planner on a dataset split")
    common(e)
    e.add_argument("--data", metavar="DIR", help="dataset directory")
    e.add_argument("--split", choices=("train", "val", "test"), help="split to score")
    e.add_argument("--planner", choices=PLANNERS, help="planner under test")
    e.add_argument("--ckpt", metavar="CKPT", help="weights for neural planners")
    e.add_argument("--w", type=float, help="weighted A* h weight (default 0.8)")
    e.add_argument("--seed", type=int, help="bootstrap seed (default 0)")
    e.add_argument("--out", metavar="PREFIX", help="results prefix "
                   "(default <data>/eval_<split>_<planner>)")
    e.add_argument("--bootstrap", type=int, help="bootstrap resamples (default 1000)")

    pl = sub.add_parser("plan", help="plan one instance and render the search")
    common(pl)
    pl.add_argument("--map", metavar="FILE", help="PGM/PPM map file")
    pl.add_argument("--start", metavar="r,c", help="start cell")
    pl.add_argument("--goal", metavar="r,c", help="goal cell")
    pl.add_argument("--ckpt", metavar="CKPT", help="use a trained encoder")
    pl.add_argument("--out", metavar="PREFIX", help="output file prefix")

    b = sub.add_parser("bench", help="measure mean runtime per instance")
    common(b)
    b.add_argument("--data", metavar="DIR", help="dataset directory")
    b.add_argument("--split", choices=("train", "val", "test"), help="split to time")
    b.add_argument("--planner", choices=PLANNERS, help="planner to time")
    b.add_argument("--ckpt", metavar="CKPT", help="weights for neural planners")
    b.add_argument("--w", type=float, help="weighted A* h weight (default 0.8)")
    b.add_argument("--repeat", type=int, help="timed repetitions (default 3)")
    return p


def _merge(parser: argparse.ArgumentParser, ns: argparse.Namespace) -> dict:
    """Layer hard defaults < config file < explicit flags."""
    merged = dict(DEFAULTS[ns.cmd])
    if ns.config:
        try:
            with open(ns.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"--config: {e}")
        if not isinstance(file_cfg, dict):
            parser.error("--config: top level must be a JSON object")
        unknown = sorted(set(file_cfg) - set(merged))
        if unknown:
            parser.error(f"--config: unknown keys {unknown}")
        merged.update(file_cfg)
    for key in merged:
        value = getattr(ns, key)
        if value is not None:
            merged[key] = value
    for key in REQUIRED[ns.cmd]:
        if merged[key] is None:
            parser.error(f"--{key.replace('_', '-')} is required")
    return merged


def _parse_cell(parser, value, name: str) -> tuple[int, int]:
    try:
        r, c = str(value).split(",")
        return int(r), int(c)
    except ValueError:
        parser.error(f"--{name} wants 'row,col', got {value!r}")


def _load_items(parser, data_dir: str, split: str | None):
    try:
        items = load_dataset(data_dir, split=split)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        parser.error(f"--data: {e}")
    if not items:
        parser.error(f"--data: no instances in split {split!r}")
    return items


def _build_planner(args: dict, kind: str):
    """Planner callable for eval/bench, or (code, message) on mismatch."""
    name = args["planner"]
    if name in NEURAL_PLANNERS:
        if not args["ckpt"]:
            return None, f"planner {name} needs --ckpt"
        try:
            ckpt = load_checkpoint(args["ckpt"])
        except (OSError, ValueError) as e:
            return None, f"--ckpt: {e}"
        want_channels = 2 if kind == "binary" else 4
        if ckpt.weights.cfg.in_channels != want_channels:
            return None, (
                f"checkpoint expects {ckpt.weights.cfg.in_channels} input "
                f"channels but this dataset needs {want_channels}"
            )
        variant = NEURAL_PLANNERS[name]
        trained = ckpt.train_cfg.variant if ckpt.train_cfg else None
        if trained is not None and trained != variant:
            return None, f"checkpoint was trained as {trained}, not {variant}"
        return neural_planner(ckpt.weights, tau=None, variant=variant), None
    if args["ckpt"]:
        return None, f"planner {name} does not take a checkpoint"
    if name == "astar":
        return astar_classical, None
    if name == "wastar":
        w = float(args["w"])
        return lambda inst: astar_classical(inst, h_weight=w), None
    if name == "bf":
        return best_first, None
    return dijkstra_shortest_path, None


def cmd_gen(parser, args: dict) -> int:
    try:
        w, h = (int(v) for v in args["size"])
    except (TypeError, ValueError):
        parser.error(f"--size wants two integers, got {args['size']!r}")
    try:
        tile = None
        if args["style"] == STYLE_TILED:
            tile = DatasetSpec(map_size=(w // 2, h // 2), n_train=0, n_val=0,
                               n_test=0, obstacle_style=args["tile_style"])
        spec = DatasetSpec(
            map_size=(w, h),
            n_train=int(args["n_train"]),
            n_val=int(args["n_val"]),
            n_test=int(args["n_test"]),
            obstacle_style=args["style"],
            seed=int(args["seed"]),
            image_mode=bool(args["image_mode"]),
            tile_source=tile,
        )
    except ValueError as e:
        parser.error(str(e))
    try:
        report = generate_dataset(spec, args["out"])
        items = load_dataset(args["out"])  # re-read validation
        meta = load_meta(args["out"])
        assert meta["n_instances"] == len(items) == report["n_instances"]
    except Exception as e:
        print(f"generation failed: {e}", file=sys.stderr)
        return EXIT_GEN
    counts = ", ".join(f"{s}={n}" for s, n in report["per_split"].items())
    print(f"wrote {report['n_maps']} maps, {report['n_instances']} instances "
          f"({counts}) to {args['out']}")
    return EXIT_OK


def cmd_train(parser, args: dict) -> int:
    items = _load_items(parser, args["data"], None)
    train_items = [it for it in items if it.split == "train"]
    val_items = [it for it in items if it.split == "val"]
    if not train_items or not val_items:
        print("training failed: dataset needs train and val splits", file=sys.stderr)
        return EXIT_TRAIN
    kind = train_items[0].inst.grid.kind
    enc_cfg = enc.EncoderConfig(in_channels=2 if kind == "binary" else 4)

    start_weights = None
    if args["resume"]:
        try:
            start_weights = load_checkpoint(args["resume"]).weights
        except (OSError, ValueError) as e:
            print(f"training failed: --resume: {e}", file=sys.stderr)
            return EXIT_TRAIN
        if start_weights.cfg != enc_cfg:
            print(
                f"training failed: resume weights built for {start_weights.cfg}, "
                f"this dataset needs {enc_cfg}",
                file=sys.stderr,
            )
            return EXIT_TRAIN

    try:
        cfg = TrainConfig(
            epochs=int(args["epochs"]),
            batch_size=int(args["batch"]),
            lr=float(args["lr"]),
            seed=int(args["seed"]),
            variant=VARIANTS[args["variant"]],
            warmup_epochs=int(args["warmup"]),
        )
    except (KeyError, ValueError) as e:
        parser.error(f"bad training settings: {e}")
    log_path = args["out"] + ".log.csv"
    parent = os.path.dirname(os.path.abspath(args["out"]))
    try:
        os.makedirs(parent, exist_ok=True)
        ckpt = train(train_items, val_items, enc_cfg, cfg,
                     log_path=log_path, start_weights=start_weights)
        save_checkpoint(args["out"], ckpt)
    except Exception as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAIN
    try:
        back = load_checkpoint(args["out"])
        rows = read_log(log_path)
        assert back.weights.cfg == enc_cfg and len(rows) == cfg.epochs
    except Exception as e:
        print(f"artifact validation failed: {e}", file=sys.stderr)
        return EXIT_TRAIN
    print(f"best val Hmean {ckpt.val_hmean:.4f} at epoch {ckpt.epoch}; "
          f"checkpoint {args['out']}, log {log_path}")
    return EXIT_OK


def _print_summary_table(summaries) -> None:
    print(f"{'metric':<12}{'mean':>10}{'lo95':>10}{'hi95':>10}")
    for key, s in summaries.items():
        print(f"{key:<12}{s.mean:>10.3f}{s.lo95:>10.3f}{s.hi95:>10.3f}")


def cmd_eval(parser, args: dict) -> int:
    items = _load_items(parser, args["data"], args["split"])
    kind = items[0].inst.grid.kind
    planner, err = _build_planner(args, kind)
    if planner is None:
        print(f"planner/checkpoint mismatch: {err}", file=sys.stderr)
        return EXIT_PLANNER

    report = evaluate(
        planner, items,
        bootstrap_b=int(args["bootstrap"]),
        seed=int(args["seed"]),
        with_chamfer=kind == "image",
    )
    prefix = args["out"] or os.path.join(
        args["data"], f"eval_{args['split']}_{args['planner']}"
    )
    doc: dict = {
        key: {"mean": s.mean, "lo95": s.lo95, "hi95": s.hi95}
        for key, s in report.summaries.items()
    }
    doc["_meta"] = {
        "planner": args["planner"],
        "split": args["split"],
        "seed": int(args["seed"]),
        "resamples": int(args["bootstrap"]),
        "instances": len(report.instances),
        "maps": len(report.maps),
        "chamfer": "symmetric mean of directed nearest-neighbor distances"
        if kind == "image" else None,
    }
    csv_lines = ["map_id,opt,exp,hmean"] + [
        f"{m.map_id},{m.opt:.4f},{m.exp:.4f},{m.hmean:.4f}" for m in report.maps
    ]
    try:
        os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
        pnm.atomic_write_text(prefix + ".json", json.dumps(doc, indent=2) + "\n")
        pnm.atomic_write_text(prefix + ".csv", "\n".join(csv_lines) + "\n")
        with open(prefix + ".json", encoding="utf-8") as fh:
            back = json.load(fh)
        assert all(set(v) == {"mean", "lo95", "hi95"}
                   for k, v in back.items() if k != "_meta")
        with open(prefix + ".csv", encoding="utf-8") as fh:
            assert len(fh.read().strip().splitlines()) == len(report.maps) + 1
    except Exception as e:
        print(f"artifact validation failed: {e}", file=sys.stderr)
        return EXIT_USAGE
    _print_summary_table(report.summaries)
    print(f"results: {prefix}.json, {prefix}.csv")
    return EXIT_OK


def render_search(grid: GridMap, result, start, goal) -> np.ndarray:
    """(H, W, 3) uint8 rendering with the declared palette."""
    h, w = grid.shape
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = COLOR_FREE
    img[grid.passable_mask() == 0] = COLOR_OBSTACLE
    img[result.closed == 1] = COLOR_EXPLORED
    for r, c in result.path:
        img[r, c] = COLOR_PATH
    img[start] = COLOR_ENDPOINT
    img[goal] = COLOR_ENDPOINT
    return img


def render_guidance(phi: np.ndarray) -> np.ndarray:
    """Grayscale PPM of the guidance map; lower cost renders whiter."""
    span = float(phi.max() - phi.min())
    norm = (phi - phi.min()) / span if span > 0 else np.zeros_like(phi)
    gray = np.round(255.0 * (1.0 - norm)).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


def cmd_plan(parser, args: dict) -> int:
    try:
        grid = pnm.load_map(args["map"])
    except (OSError, ValueError) as e:
        parser.error(f"--map: {e}")
    start = _parse_cell(parser, args["start"], "start")
    goal = _parse_cell(parser, args["goal"], "goal")
    try:
        inst = ProblemInstance(grid=grid, start=start, goal=goal)
    except ValueError as e:
        parser.error(str(e))

    phi_values = None
    if args["ckpt"]:
        try:
            ckpt = load_checkpoint(args["ckpt"])
        except (OSError, ValueError) as e:
            print(f"planner/checkpoint mismatch: --ckpt: {e}", file=sys.stderr)
            return EXIT_PLANNER
        want = 2 if grid.kind == "binary" else 4
        if ckpt.weights.cfg.in_channels != want:
            print(
                f"planner/checkpoint mismatch: checkpoint expects "
                f"{ckpt.weights.cfg.in_channels} input channels, map needs {want}",
                file=sys.stderr,
            )
            return EXIT_PLANNER
        variant = ckpt.train_cfg.variant if ckpt.train_cfg else VARIANT_NEURAL_ASTAR
        phi_values = enc.forward(ckpt.weights, inst).values
        planner = neural_planner(ckpt.weights, tau=None, variant=variant)
    else:
        planner = astar_classical

    try:
        result = planner(inst)
    except Unreachable as e:
        print(f"no path: {e}", file=sys.stderr)
        return EXIT_UNREACHABLE

    prefix = args["out"]
    parent = os.path.dirname(os.path.abspath(prefix))
    os.makedirs(parent, exist_ok=True)
    path_doc = [[int(r), int(c)] for r, c in result.path]
    pnm.atomic_write_text(prefix + ".path.json", json.dumps(path_doc) + "\n")
    pnm.write_ppm(prefix + ".search.ppm", render_search(grid, result, start, goal))
    if phi_values is not None:
        pnm.write_ppm(prefix + ".guidance.ppm", render_guidance(phi_values))
    try:
        with open(prefix + ".path.json", encoding="utf-8") as fh:
            back = json.load(fh)
        assert back and tuple(back[0]) == start and tuple(back[-1]) == goal
        pnm.read_ppm(prefix + ".search.ppm")
        if phi_values is not None:
            pnm.read_ppm(prefix + ".guidance.ppm")
    except Exception as e:
        print(f"artifact validation failed: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(f"path with {len(result.path) - 1} steps, {int(result.explored_count)} "
          f"nodes explored; wrote {prefix}.path.json, {prefix}.search.ppm"
          + (f", {prefix}.guidance.ppm" if phi_values is not None else ""))
    return EXIT_OK


def bench_rows(items, planner, repeat: int) -> list[dict]:
    """Mean wall-clock per instance, grouped by map size; one warm-up
    pass per group is excluded from the timing."""
    groups: dict[tuple[int, int], list] = {}
    for it in items:
        groups.setdefault(it.inst.grid.shape, []).append(it)
    rows = []
    for shape in sorted(groups):
        group = groups[shape]
        for it in group:  # warm-up, untimed
            _run_quiet(planner, it.inst)
        t0 = time.perf_counter()
        for _ in range(repeat):
            for it in group:
                _run_quiet(planner, it.inst)
        elapsed = time.perf_counter() - t0
        rows.append({
            "size": f"{shape[1]}x{shape[0]}",
            "instances": len(group),
            "repeat": repeat,
            "mean_seconds": elapsed / (repeat * len(group)),
        })
    return rows


def _run_quiet(planner, inst) -> None:
    try:
        planner(inst)
    except Unreachable:
        pass


def cmd_bench(parser, args: dict) -> int:
    items = _load_items(parser, args["data"], args["split"])
    kind = items[0].inst.grid.kind
    planner, err = _build_planner(args, kind)
    if planner is None:
        print(f"planner/checkpoint mismatch: {err}", file=sys.stderr)
        return EXIT_PLANNER
    repeat = int(args["repeat"])
    if repeat < 1:
        parser.error("--repeat must be >= 1")
    print("size,planner,instances,repeat,mean_seconds")
    for row in bench_rows(items, planner, repeat):
        print(f"{row['size']},{args['planner']},{row['instances']},"
              f"{row['repeat']},{row['mean_seconds']:.6f}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "plan": cmd_plan,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    args = _merge(parser, ns)
    return COMMANDS[ns.cmd](parser, args)


if __name__ == "__main__":
    sys.exit(main())
