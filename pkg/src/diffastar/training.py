"""Training loop for the guidance encoder.

The loss is the mean absolute difference between the search's closed mask
and the (optionally 3x3-dilated) reference path, averaged over the batch;
backpropagation runs through every search step. RMSProp updates the
weights; the checkpoint kept is the epoch with the best validation
harmonic mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .autodiff import GradTensor
from .diff_astar import (
    MODE_BINARY_MASKED,
    MODE_IMAGE_UNMASKED,
    VARIANT_NEURAL_ASTAR,
    VARIANT_NEURAL_BF,
    DiffAstarConfig,
    run,
    run_inference,
)
from .errors import StepLimitExceeded, Unreachable
from .grid import ProblemInstance
from .metrics import evaluate, vanilla_explored

# dilation kicks in for maps at least this wide unless configured explicitly
DILATE_WIDTH_THRESHOLD = 64


# validation map-mean metrics usable as checkpoint-selection floors
SELECTABLE_METRICS = frozenset({"suc", "opt", "exp", "hmean", "path_ratio"})


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    lr: float = 0.001
    alpha: float = 0.99
    eps: float = 1e-8
    seed: int = 0
    dilate: bool | None = None
    tau: float | None = None
    variant: str = VARIANT_NEURAL_ASTAR
    # Checkpoint selection: epochs whose validation map-means meet every
    # floor (metric name -> minimum) outrank epochs that miss one; within
    # each group the higher validation Hmean wins. None selects purely by
    # Hmean. Lets deployments insist on e.g. a minimum optimality rate
    # instead of trading it all away for fewer expansions.
    select_floors: dict[str, float] | None = None
    # First N epochs fit the guidance map directly to the complement of the
    # target mask (pixel regression, no search unrolling): cheap shaping
    # that starts the search phase from corridor-selective guidance instead
    # of a flat field, which the optimizer otherwise collapses into.
    warmup_epochs: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.variant not in (VARIANT_NEURAL_ASTAR, VARIANT_NEURAL_BF):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.select_floors:
            bad = set(self.select_floors) - SELECTABLE_METRICS
            if bad:
                raise ValueError(f"unknown selection metrics {sorted(bad)}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")


@dataclass
class Checkpoint:
    weights: enc.EncoderWeights
    epoch: int
    val_hmean: float
    train_cfg: TrainConfig | None = None


@dataclass
class LogRow:
    epoch: int
    mean_loss: float
    val_opt: float
    val_exp: float
    val_hmean: float


def l1_loss(c: GradTensor, gt: np.ndarray) -> GradTensor:
    """Mean absolute difference over all cells."""
    diff = ad.sub(c, ad.constant(gt.astype(np.float64)))
    return ad.scale(ad.reduce_sum(ad.abs_(diff)), 1.0 / c.values.size)


def shaping_loss(phi: GradTensor, target: np.ndarray) -> GradTensor:
    """Class-balanced L1 between the guidance map and ``1 - target``.

    The corridor mask is sparse (a few percent of cells), so a plain mean
    would let the background majority drag the whole map toward 1; weighting
    each class by half its inverse frequency makes corridor and background
    contribute equally.
    """
    t = target.astype(np.float64)
    p = float(t.mean())
    if not 0.0 < p < 1.0:
        return l1_loss(phi, 1.0 - t)
    weights = np.where(t > 0, 0.5 / p, 0.5 / (1.0 - p))
    diff = ad.abs_(ad.sub(phi, ad.constant(1.0 - t)))
    return ad.scale(ad.reduce_sum(ad.mul(ad.constant(weights), diff)),
                    1.0 / phi.values.size)


def dilate3x3(mask: np.ndarray) -> np.ndarray:
    """Binary dilation with a full 3x3 structuring element."""
    m = mask.astype(bool)
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:-1, :] |= m[1:, :]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    out[1:, 1:] |= m[:-1, :-1]
    out[1:, :-1] |= m[:-1, 1:]
    out[:-1, 1:] |= m[1:, :-1]
    out[:-1, :-1] |= m[1:, 1:]
    return out.astype(np.uint8)


class RMSProp:
    """acc <- alpha*acc + (1-alpha)*g^2; p <- p - lr*g/(sqrt(acc)+eps)."""

    def __init__(self, named_params, lr: float, alpha: float = 0.99, eps: float = 1e-8) -> None:
        self.params = list(named_params)
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.acc = {name: np.zeros_like(t.values) for name, t in self.params}

    def step(self) -> None:
        for name, t in self.params:
            g = t.grad
            if g is None:
                continue
            acc = self.acc[name]
            acc *= self.alpha
            acc += (1.0 - self.alpha) * g * g
            t.values -= self.lr * g / (np.sqrt(acc) + self.eps)

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None


def search_config(inst: ProblemInstance, tau: float | None, variant: str) -> DiffAstarConfig:
    mode = MODE_BINARY_MASKED if inst.grid.kind == "binary" else MODE_IMAGE_UNMASKED
    return DiffAstarConfig(tau=tau, mode=mode, variant=variant)


def neural_planner(weights: enc.EncoderWeights, tau: float | None = None,
                   variant: str = VARIANT_NEURAL_ASTAR):
    """Inference-time planner: encoder forward, then the heap replay."""

    def plan(inst: ProblemInstance):
        phi = enc.forward(weights, inst)  # no tape active: plain forward
        return run_inference(inst, phi.values, search_config(inst, tau, variant))

    return plan


def selection_key(means: dict, floors: dict | None) -> tuple[bool, float]:
    """Checkpoint ranking key: (clears every floor, validation Hmean).

    Tuple order makes any floor-clearing epoch outrank any epoch that
    misses a floor; within a group the higher Hmean wins.
    """
    ok = all(means[k] >= v for k, v in (floors or {}).items())
    return ok, means["hmean"]


def _target_mask(inst: ProblemInstance, dilate: bool | None) -> np.ndarray:
    if inst.gt_path is None:
        raise ValueError("training instances need a reference path")
    do = dilate if dilate is not None else inst.grid.width >= DILATE_WIDTH_THRESHOLD
    return dilate3x3(inst.gt_path) if do else inst.gt_path


def train(
    train_items,
    val_items,
    enc_cfg: enc.EncoderConfig,
    cfg: TrainConfig,
    log_path: str | None = None,
    start_weights: enc.EncoderWeights | None = None,
) -> Checkpoint:
    """Train on dataset items (``.inst`` with reference paths, ``.id``,
    ``.map_id``); returns the best-validation checkpoint. Passing
    ``start_weights`` resumes from those values instead of a fresh init
    (their config must equal ``enc_cfg``)."""
    if not train_items or not val_items:
        raise ValueError("need non-empty train and validation sets")
    if start_weights is not None:
        if start_weights.cfg != enc_cfg:
            raise ValueError(
                f"resume weights built for {start_weights.cfg}, expected {enc_cfg}"
            )
        weights = start_weights.copy_values()
    else:
        weights = enc.init_weights(enc_cfg, seed=cfg.seed)
    opt = RMSProp(weights.parameter_list(), cfg.lr, cfg.alpha, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    targets = [_target_mask(it.inst, cfg.dilate) for it in train_items]
    e_star = {it.id: vanilla_explored(it.inst) for it in val_items}

    best: Checkpoint | None = None
    best_key = (False, float("-inf"))
    rows: list[LogRow] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_items))
        loss_sum = 0.0
        warming = epoch <= cfg.warmup_epochs
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            insts = [train_items[i].inst for i in batch]
            scfg = search_config(insts[0], cfg.tau, cfg.variant)
            with ad.Tape():
                phis = [enc.forward(weights, inst) for inst in insts]
                if warming:
                    terms = [shaping_loss(phi, targets[i])
                             for phi, i in zip(phis, batch)]
                else:
                    try:
                        outs = run(insts, phis, scfg)
                    except (Unreachable, StepLimitExceeded) as e:
                        ids = [train_items[i].id for i in batch]
                        raise type(e)(f"{e}; batch instance ids {ids}") from e
                    terms = [l1_loss(out.C, targets[i]) for out, i in zip(outs, batch)]
                total = terms[0]
                for term in terms[1:]:
                    total = ad.add(total, term)
                loss = ad.scale(total, 1.0 / len(terms))
            loss_value = float(loss.values)
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
            loss_sum += loss_value * len(batch)
        mean_loss = loss_sum / len(train_items)

        planner = neural_planner(weights, cfg.tau, cfg.variant)
        report = evaluate(planner, val_items, bootstrap_b=0, explored_star=e_star)
        means = report.map_means()
        rows.append(LogRow(epoch, mean_loss, means["opt"], means["exp"], means["hmean"]))
        key = selection_key(means, cfg.select_floors)
        if best is None or key > best_key:
            best = Checkpoint(weights.copy_values(), epoch, means["hmean"], cfg)
            best_key = key

    if log_path is not None:
        write_log(log_path, rows, cfg)
    return best


def write_log(path: str, rows: list[LogRow], cfg: TrainConfig) -> None:
    from .pnm import atomic_write_text

    lines = [f"# optimizer=rmsprop lr={cfg.lr} alpha={cfg.alpha} eps={cfg.eps}"]
    lines.append("epoch,mean_loss,val_opt,val_exp,val_hmean")
    for r in rows:
        lines.append(
            f"{r.epoch},{r.mean_loss:.6f},{r.val_opt:.4f},{r.val_exp:.4f},{r.val_hmean:.4f}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_log(path: str) -> list[LogRow]:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("epoch,"):
                continue
            e, ml, vo, ve, vh = line.split(",")
            rows.append(LogRow(int(e), float(ml), float(vo), float(ve), float(vh)))
    return rows


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Weights file plus a sidecar JSON with the training configuration."""
    import dataclasses
    import json

    from .pnm import atomic_write_text

    enc.save_weights(path, ckpt.weights)
    meta = {"epoch": ckpt.epoch, "val_hmean": ckpt.val_hmean}
    if ckpt.train_cfg is not None:
        meta["train_cfg"] = dataclasses.asdict(ckpt.train_cfg)
    atomic_write_text(path + ".json", json.dumps(meta, indent=2) + "\n")


def load_checkpoint(path: str) -> Checkpoint:
    import json
    import os

    weights = enc.load_weights(path)
    epoch, val_hmean, train_cfg = 0, float("nan"), None
    if os.path.exists(path + ".json"):
        with open(path + ".json") as f:
            meta = json.load(f)
        epoch = int(meta.get("epoch", 0))
        val_hmean = float(meta.get("val_hmean", float("nan")))
        if "train_cfg" in meta:
            train_cfg = TrainConfig(**meta["train_cfg"])
    return Checkpoint(weights, epoch, val_hmean, train_cfg)
