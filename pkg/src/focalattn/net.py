"""A small U-shaped 3D-conv network that scores every slice of a focal stack.

The stack axis is convolved (kernel ``stack_kernel``, stride 1, zero padded)
but never pooled, so the output attention volume has exactly as many frames
as the input for any stack size.  Depth and AiF readouts follow the attention
volume with no learnable parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, concat, conv3d, leaky_relu, resample_spatial
from .fusion import expected_depth, fuse_aif, softmax_normalize, softplus_normalize
from .stack import FocalStack

INPUT_CENTER = 0.5
CHECKPOINT_MAGIC = b"FATTNCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    levels: int = 3
    base_channels: int = 16
    stack_kernel: int = 3
    leaky_slope: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.stack_kernel < 1 or self.stack_kernel % 2 == 0:
            raise ValueError("stack_kernel must be a positive odd number")

    @property
    def multiple(self) -> int:
        return 2**self.levels


class Model:
    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "Model":
        return Model(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_equal(self, other: "Model") -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k].data, other.params[k].data) for k in self.params
        )


def layer_plan(config: ModelConfig) -> list[tuple[str, int, int, int, int]]:
    """``(name, k, cin, cout, kf)`` for every conv in build order."""
    c = config.base_channels
    kf = config.stack_kernel
    plan = []
    cin = 3
    for lvl in range(config.levels):
        width = c * 2**lvl
        plan += [(f"enc{lvl}.conv0", 3, cin, width, kf), (f"enc{lvl}.conv1", 3, width, width, kf)]
        cin = width
    width = c * 2**config.levels
    plan += [("bottleneck.conv0", 3, cin, width, kf), ("bottleneck.conv1", 3, width, width, kf)]
    cin = width
    for lvl in reversed(range(config.levels)):
        width = c * 2**lvl
        plan += [(f"dec{lvl}.conv0", 3, cin + width, width, kf), (f"dec{lvl}.conv1", 3, width, width, kf)]
        cin = width
    plan.append(("head", 1, cin, 1, 1))
    return plan


def build_model(config: ModelConfig | None = None) -> Model:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``) and zero biases, drawn from ``config.seed``."""
    config = config or ModelConfig()
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, k, cin, cout, kf in layer_plan(config):
        bound = np.sqrt(6.0 / (k * k * kf * cin))
        w = rng.uniform(-bound, bound, size=(k, k, cin, cout, kf)).astype(config.dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=config.dtype), requires_grad=True)
    return Model(config, params)


def _stack_array(stack) -> np.ndarray:
    if isinstance(stack, FocalStack):
        return stack.slices
    return stack.data if isinstance(stack, Tensor) else np.asarray(stack)


def forward(model: Model, stack) -> Tensor:
    """Attention volume ``(B?, H, W, 1, F)`` for a ``(B?, H, W, 3, F)`` stack."""
    cfg = model.config
    x = _stack_array(stack)
    if x.ndim not in (4, 5) or x.shape[-2] != 3:
        raise ValueError(f"stack must be (B?, H, W, 3, F), got shape {x.shape}")
    h, w, f = x.shape[-4], x.shape[-3], x.shape[-1]
    if h % cfg.multiple or w % cfg.multiple:
        raise ValueError(f"H and W must be multiples of {cfg.multiple} for {cfg.levels} levels, got {h}x{w}")
    if f < 2:
        raise ValueError("a focal stack needs at least 2 slices")
    p = model.params
    slope = cfg.leaky_slope

    def block(t, name):
        t = leaky_relu(conv3d(t, p[f"{name}.conv0.weight"], p[f"{name}.conv0.bias"]), slope)
        return leaky_relu(conv3d(t, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"]), slope)

    t = Tensor(x.astype(cfg.dtype) - np.asarray(INPUT_CENTER, dtype=cfg.dtype))
    skips = []
    for lvl in range(cfg.levels):
        t = block(t, f"enc{lvl}")
        skips.append(t)
        t = resample_spatial(t, "down")
    t = block(t, "bottleneck")
    for lvl in reversed(range(cfg.levels)):
        t = resample_spatial(t, "up")
        t = block(concat([t, skips[lvl]], axis=-2), f"dec{lvl}")
    return conv3d(t, p["head.weight"], p["head.bias"])


def readouts(scores: Tensor, stack, positions) -> tuple[Tensor, Tensor]:
    """Depth from softplus weights and AiF from softmax weights of one attention volume."""
    slices = _stack_array(stack)
    depth = expected_depth(softplus_normalize(scores), positions)
    aif = fuse_aif(softmax_normalize(scores), slices.astype(scores.dtype))
    return depth, aif


def infer(model: Model, stack: FocalStack) -> tuple[np.ndarray, np.ndarray]:
    """Depth map ``H x W x 1`` and AiF image ``H x W x 3`` for one stack."""
    scores = forward(model, stack)
    depth, aif = readouts(Tensor(scores.data), stack, stack.axis)
    return depth.data, aif.data


# ---- checkpoints -----------------------------------------------------
#
# magic(8) | u32 version | u32 len + JSON config | u32 count |
#   per parameter: u16 len + name | u8 ndim | ndim * u32 | float32 LE data


def save_checkpoint(model: Model, path) -> None:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", CHECKPOINT_VERSION, len(cfg)) + cfg
    out += struct.pack("<I", len(model.params))
    for name, t in model.params.items():
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
        out += np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> Model:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a focalattn checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig(**json.loads(take(cfg_len)))
    model = build_model(config)
    (count,) = struct.unpack("<I", take(4))
    if count != len(model.params):
        raise CheckpointError(f"checkpoint has {count} parameters, config expects {len(model.params)}")
    for expected in model.params:
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        if name != expected:
            raise CheckpointError(f"parameter {name!r} found where {expected!r} was expected")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        target = model.params[name]
        if shape != target.shape:
            raise CheckpointError(f"parameter {name!r} has shape {shape}, config expects {target.shape}")
        data = np.frombuffer(take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        target.data = data.astype(config.dtype)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last parameter")
    return model
