"""Guidance-map encoder: a small U-Net from map + endpoints to cell costs.

The output is a per-cell guidance cost in (0, 1) via a sigmoid head; with
``learn_output_scale`` the sigmoid is multiplied by ``exp(log_scale)`` so
image-mode costs can exceed 1. The net is fully convolutional: weights
trained at one map size apply to any size divisible by ``2**depth``.

Weight files use a little-endian binary layout:

    magic "NASW" | u32 version=1 | u32 config_len | config JSON (UTF-8)
    | u32 tensor_count | per tensor: u16 name_len, name, u8 rank,
    u32 dims..., float32 values row-major

Tensors are written in lexicographic name order and stored float32;
in-memory math stays float64.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GradTensor
from .errors import ShapeMismatch
from .grid import ProblemInstance, onehot_mask

MAGIC = b"NASW"
VERSION = 1
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    base_channels: int = 16
    depth: int = 3
    learn_output_scale: bool = False
    output_scale_init: float = 10.0

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.base_channels < 1 or self.depth < 1:
            raise ValueError("channel counts and depth must be positive")
        if self.output_scale_init <= 0:
            raise ValueError("output_scale_init must be positive")


def _conv_shapes(cfg: EncoderConfig) -> list[tuple[str, int, int]]:
    """(name_prefix, cin, cout) for every 3x3 conv, in build order."""
    b = cfg.base_channels
    shapes = []
    cin = cfg.in_channels
    for i in range(cfg.depth):
        cout = b * (2 ** i)
        shapes.append((f"enc{i}_conv1", cin, cout))
        shapes.append((f"enc{i}_conv2", cout, cout))
        cin = cout
    mid = b * (2 ** cfg.depth)
    shapes.append(("mid_conv1", cin, mid))
    shapes.append(("mid_conv2", mid, mid))
    cin = mid
    for i in reversed(range(cfg.depth)):
        skip = b * (2 ** i)
        shapes.append((f"dec{i}_conv1", cin + skip, skip))
        shapes.append((f"dec{i}_conv2", skip, skip))
        cin = skip
    return shapes


class EncoderWeights:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, GradTensor]) -> None:
        self.cfg = cfg
        self.params = params

    def parameter_list(self) -> list[tuple[str, GradTensor]]:
        return sorted(self.params.items())

    def tensors(self) -> list[GradTensor]:
        return [t for _, t in self.parameter_list()]

    def copy_values(self) -> "EncoderWeights":
        return EncoderWeights(
            self.cfg,
            {k: GradTensor(t.values.copy(), requires_grad=True) for k, t in self.params.items()},
        )


def init_weights(cfg: EncoderConfig, seed: int = 0) -> EncoderWeights:
    """He-uniform conv weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, GradTensor] = {}

    def conv(name: str, cin: int, cout: int, k: int) -> None:
        bound = math.sqrt(6.0 / (cin * k * k))
        params[name + "_w"] = GradTensor(
            rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True
        )
        params[name + "_b"] = GradTensor(np.zeros(cout), requires_grad=True)

    for name, cin, cout in _conv_shapes(cfg):
        conv(name, cin, cout, 3)
    conv("head", cfg.base_channels, 1, 1)
    if cfg.learn_output_scale:
        params["log_scale"] = GradTensor(
            np.asarray(math.log(cfg.output_scale_init)), requires_grad=True
        )
    return EncoderWeights(cfg, params)


def encoder_input(inst: ProblemInstance) -> np.ndarray:
    """(C, H, W) input planes: map content plus a start+goal indicator."""
    shape = inst.grid.shape
    points = onehot_mask(inst.start, shape) + onehot_mask(inst.goal, shape)
    if inst.grid.kind == "binary":
        planes = [inst.grid.binary.astype(np.float64), points]
    else:
        planes = [inst.grid.image[:, :, c] for c in range(3)] + [points]
    return np.stack(planes)


def forward(weights: EncoderWeights, inst: ProblemInstance) -> GradTensor:
    """Guidance cost map for one instance; records on the active tape."""
    cfg = weights.cfg
    x_np = encoder_input(inst)
    if x_np.shape[0] != cfg.in_channels:
        raise ShapeMismatch(
            f"map kind gives {x_np.shape[0]} input channels, encoder expects {cfg.in_channels}"
        )
    h, w = x_np.shape[1], x_np.shape[2]
    m = 2 ** cfg.depth
    if h % m or w % m:
        raise ShapeMismatch(f"map size {h}x{w} must be divisible by {m}")
    p = weights.params

    def block(x: GradTensor, name: str) -> GradTensor:
        x = ad.leaky_relu(ad.conv2d_learned(x, p[f"{name}_conv1_w"], p[f"{name}_conv1_b"]), LEAKY_SLOPE)
        return ad.leaky_relu(ad.conv2d_learned(x, p[f"{name}_conv2_w"], p[f"{name}_conv2_b"]), LEAKY_SLOPE)

    x = ad.constant(x_np)
    skips = []
    for i in range(cfg.depth):
        x = block(x, f"enc{i}")
        skips.append(x)
        x = ad.maxpool2(x)
    x = block(x, "mid")
    for i in reversed(range(cfg.depth)):
        x = ad.concat_ch(ad.upsample2(x), skips[i])
        x = block(x, f"dec{i}")
    x = ad.conv2d_learned(x, p["head_w"], p["head_b"])
    phi = ad.sigmoid(ad.reshape(x, (h, w)))
    if cfg.learn_output_scale:
        phi = ad.mul(phi, ad.exp(p["log_scale"]))
    return phi


def save_weights(path: str, weights: EncoderWeights) -> None:
    cfg_json = json.dumps(asdict(weights.cfg), sort_keys=True).encode("utf-8")
    items = weights.parameter_list()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(cfg_json))
    out += cfg_json
    out += struct.pack("<I", len(items))
    for name, t in items:
        nb = name.encode("utf-8")
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(t.values, dtype=np.float32)
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
        out += arr.tobytes(order="C")
    from .pnm import atomic_write_bytes

    atomic_write_bytes(path, bytes(out))


def load_weights(path: str) -> EncoderWeights:
    with open(path, "rb") as f:
        data = f.read()
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ValueError(f"{path}: not a weight file (bad magic)")
    version, cfg_len = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported weight file version {version}")
    pos = 12
    cfg = EncoderConfig(**json.loads(bytes(view[pos:pos + cfg_len]).decode("utf-8")))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    params: dict[str, GradTensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", view, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", view, pos) if rank else ()
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        vals = np.frombuffer(view, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos += 4 * n
        params[name] = GradTensor(vals.astype(np.float64), requires_grad=True)
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes in weight file")
    expected = init_weights(cfg, seed=0)
    if set(params) != set(expected.params):
        raise ValueError(f"{path}: tensor names do not match the declared config")
    for k, t in expected.params.items():
        if params[k].values.shape != t.values.shape:
            raise ShapeMismatch(f"{path}: tensor {k} has shape {params[k].values.shape}, expected {t.values.shape}")
    return EncoderWeights(cfg, params)
