"""Prompt generator, prompt-modulated U-Net backbone and prompt guidance field.

Parameters live in one insertion-ordered ``dict[str, Tensor]``. The key order
produced by :func:`init_params` is the checkpoint serialization order:

1. ``prompt.conv1.{w,b}``, ``prompt.gn1.{g,b}``, ``prompt.conv2.{w,b}``, ``prompt.gn2.{g,b}``
2. encoder levels ``enc{i}.*`` (task block), each followed by ``down{i}.{w,b}``
   except the deepest level
3. ``mid.*`` (bottleneck task block)
4. decoder levels from deep to shallow: ``fuse{i}.{w,b}`` then ``dec{i}.*``
5. ``out.{w,b}`` (final 3x3 conv to RGB)
6. ``field.{w,b}`` then ``field.gain``

A task block ``<p>`` owns ``<p>.conv1.{w,b}``, ``<p>.gn1.{g,b}``,
``<p>.conv2.{w,b}``, ``<p>.gn2.{g,b}``, ``<p>.mlp.{w,b}`` and ``<p>.alpha``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

Params = dict[str, Tensor]

ALPHA_INIT = 0.1
FIELD_GAIN_INIT = 0.01
PROMPT_SCALE = 0.1
_Z_LO = float(np.nextafter(0.0, 1.0))
_Z_HI = float(np.nextafter(PROMPT_SCALE, 0.0))


@dataclass(frozen=True)
class ArchConfig:
    levels: int = 3
    base_channels: int = 16
    prompt_dim: int = 16
    prompt_mode: str = "literal"
    in_channels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        if self.prompt_dim < 1:
            raise ConfigError("prompt_dim must be >= 1")
        if self.prompt_mode not in ("literal", "pool_late"):
            raise ConfigError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.in_channels != 3:
            raise ConfigError("only 3-channel input is supported")

    def width(self, level: int) -> int:
        return self.base_channels * 2**level

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PromptVector:
    z: Tensor
    d: int
    mode: str


def gn_groups(channels: int) -> int:
    return min(8, channels)


# ---------------------------------------------------------------- init


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _conv_init(rng: np.random.Generator, cout: int, cin: int, k: int) -> tuple[Tensor, Tensor]:
    # weights and biases both U(-1/sqrt(fan_in), 1/sqrt(fan_in)); nonzero biases
    # let the first group norms see absolute intensity from the start
    fan_in = cin * k * k
    return _fan_in_uniform(rng, (cout, cin, k, k), fan_in), _fan_in_uniform(rng, (cout,), fan_in)


def _linear_init(rng: np.random.Generator, cout: int, cin: int) -> tuple[Tensor, Tensor]:
    return _fan_in_uniform(rng, (cout, cin), cin), _fan_in_uniform(rng, (cout,), cin)


def _norm_init(c: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True)


def _scalar(value: float) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value), requires_grad=True)


def _add_conv(params: Params, name: str, rng, cout, cin, k) -> None:
    params[f"{name}.w"], params[f"{name}.b"] = _conv_init(rng, cout, cin, k)


def _add_norm(params: Params, name: str, c: int) -> None:
    params[f"{name}.g"], params[f"{name}.b"] = _norm_init(c)


def _add_task_block(params: Params, name: str, rng, cin: int, cout: int, d: int) -> None:
    _add_conv(params, f"{name}.conv1", rng, cout, cin, 3)
    _add_norm(params, f"{name}.gn1", cout)
    _add_conv(params, f"{name}.conv2", rng, cout, cout, 3)
    _add_norm(params, f"{name}.gn2", cout)
    params[f"{name}.mlp.w"], params[f"{name}.mlp.b"] = _linear_init(rng, cout, d)
    params[f"{name}.alpha"] = _scalar(ALPHA_INIT)


def init_params(config: ArchConfig, rng: np.random.Generator) -> Params:
    d = config.prompt_dim
    k = 1 if config.prompt_mode == "literal" else 3
    params: Params = {}
    _add_conv(params, "prompt.conv1", rng, 2 * d, config.in_channels, k)
    _add_norm(params, "prompt.gn1", 2 * d)
    _add_conv(params, "prompt.conv2", rng, d, 2 * d, k)
    _add_norm(params, "prompt.gn2", d)

    cin = config.in_channels
    for lvl in range(config.levels):
        c = config.width(lvl)
        _add_task_block(params, f"enc{lvl}", rng, cin, c, d)
        if lvl < config.levels - 1:
            _add_conv(params, f"down{lvl}", rng, config.width(lvl + 1), c, 3)
            cin = config.width(lvl + 1)
        else:
            cin = c
    deep = config.width(config.levels - 1)
    _add_task_block(params, "mid", rng, deep, deep, d)
    for lvl in range(config.levels - 2, -1, -1):
        c = config.width(lvl)
        _add_conv(params, f"fuse{lvl}", rng, c, config.width(lvl + 1) + c, 3)
        _add_task_block(params, f"dec{lvl}", rng, c, c, d)
    _add_conv(params, "out", rng, config.in_channels, config.base_channels, 3)
    params["field.w"], params["field.b"] = _linear_init(rng, config.in_channels, d)
    params["field.gain"] = _scalar(FIELD_GAIN_INIT)
    return params


def param_count(params: Params) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------- forward


def normalize_input(x: Tensor) -> Tensor:
    """Per-sample, per-channel standardization over the spatial axes."""
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    sd = d.std(axis=(2, 3), keepdims=True)
    return Tensor((d - mu) / (sd + 1e-6))


def prompt_generate(x: Tensor, params: Params, config: ArchConfig) -> PromptVector:
    """Map a frame batch to a bounded task prompt of shape ``(N, d, 1, 1)``.

    ``literal`` pools the standardized frame to ``(N, 3, 1, 1)`` first and runs
    a 1x1 conv stack on it. ``pool_late`` runs stride-2 3x3 convs at full
    resolution and pools after the sigmoid. Both end in ``0.1 * sigmoid(.)``
    so every entry lies in (0, 0.1).
    """
    p = params
    xn = normalize_input(x)
    if config.prompt_mode == "literal":
        h = T.spatial_mean(xn)
        h = T.conv2d(h, p["prompt.conv1.w"], p["prompt.conv1.b"])
        h = T.gelu(T.group_norm(h, 1, p["prompt.gn1.g"], p["prompt.gn1.b"]))
        h = T.conv2d(h, p["prompt.conv2.w"], p["prompt.conv2.b"])
        h = T.sigmoid(T.group_norm(h, 1, p["prompt.gn2.g"], p["prompt.gn2.b"]))
    else:
        if x.shape[2] < 4 or x.shape[3] < 4:
            raise ShapeError(f"pool_late prompt needs H, W >= 4, got {x.shape[2:]}")
        h = T.conv2d(xn, p["prompt.conv1.w"], p["prompt.conv1.b"], stride=2, padding=1)
        h = T.gelu(T.group_norm(h, 1, p["prompt.gn1.g"], p["prompt.gn1.b"]))
        h = T.conv2d(h, p["prompt.conv2.w"], p["prompt.conv2.b"], stride=2, padding=1)
        h = T.sigmoid(T.group_norm(h, 1, p["prompt.gn2.g"], p["prompt.gn2.b"]))
        h = T.spatial_mean(h)
    # in float64 a saturated sigmoid rounds to exactly 0 or 1; keep z strictly inside (0, 0.1)
    z = T.clamp(T.scale(h, PROMPT_SCALE), _Z_LO, _Z_HI)
    return PromptVector(z, config.prompt_dim, config.prompt_mode)


def conv_block(x: Tensor, params: Params, name: str) -> Tensor:
    p = params
    c = p[f"{name}.conv1.w"].shape[0]
    g = gn_groups(c)
    h = T.conv2d(x, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], padding=1)
    h = T.gelu(T.group_norm(h, g, p[f"{name}.gn1.g"], p[f"{name}.gn1.b"]))
    h = T.conv2d(h, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], padding=1)
    return T.group_norm(h, g, p[f"{name}.gn2.g"], p[f"{name}.gn2.b"])


def task_block(x: Tensor, z: PromptVector, params: Params, name: str) -> Tensor:
    """``ConvBlock(x) + alpha * MLP(z)`` with the MLP output broadcast over H, W."""
    mlp_w = params[f"{name}.mlp.w"]
    if z.z.shape[1] != mlp_w.shape[1]:
        raise ShapeError(f"prompt width {z.z.shape[1]} != block {name} MLP input {mlp_w.shape[1]}")
    if x.shape[1] != params[f"{name}.conv1.w"].shape[1]:
        raise ShapeError(f"block {name} expects {params[f'{name}.conv1.w'].shape[1]} channels, got {x.shape[1]}")
    feat = conv_block(x, params, name)
    mod = T.linear(z.z, mlp_w, params[f"{name}.mlp.b"])
    return T.add(feat, T.mul(params[f"{name}.alpha"], mod))


def physics_unet_forward(x_in: Tensor, z: PromptVector, params: Params, config: ArchConfig) -> Tensor:
    n, c, h, w = x_in.shape
    div = config.divisor
    if h % div or w % div:
        raise ShapeError(f"input {h}x{w} must be divisible by {div} for {config.levels} levels")
    skips = []
    feat = x_in
    for lvl in range(config.levels):
        feat = task_block(feat, z, params, f"enc{lvl}")
        if lvl < config.levels - 1:
            skips.append(feat)
            feat = T.conv2d(feat, params[f"down{lvl}.w"], params[f"down{lvl}.b"], stride=2, padding=1)
    feat = task_block(feat, z, params, "mid")
    for lvl in range(config.levels - 2, -1, -1):
        feat = T.concat_channels(T.upsample_nearest(feat, 2), skips[lvl])
        feat = T.conv2d(feat, params[f"fuse{lvl}.w"], params[f"fuse{lvl}.b"], padding=1)
        feat = task_block(feat, z, params, f"dec{lvl}")
    return T.conv2d(feat, params["out.w"], params["out.b"], padding=1)


def prompt_field(z: PromptVector, params: Params, shape: tuple[int, int, int, int]) -> Tensor:
    """Spatially constant per-channel guidance field ``gain * linear(z)``."""
    n, c, h, w = shape
    v = T.mul(params["field.gain"], T.linear(z.z, params["field.w"], params["field.b"]))
    if v.shape[:2] != (n, c):
        raise ShapeError(f"prompt field {v.shape[:2]} does not match target {(n, c)}")
    # broadcast by adding onto a constant zero canvas
    return T.add(Tensor(np.zeros(shape)), v)


# ---------------------------------------------------------------- complexity


def _conv_macs(cout: int, cin: int, k: int, ho: int, wo: int) -> int:
    return cout * cin * k * k * ho * wo


def layer_macs(config: ArchConfig, h: int, w: int, steps: int = 5) -> list[tuple[str, int]]:
    """Per-layer multiply-accumulates for one frame of size ``h`` x ``w``.

    Convs count ``Cout*Cin*kh*kw*H'*W'``, linear layers ``Cout*Cin``. Each
    Euler step adds two per pixel value (decay scaling of the potential term
    and the ``dt * f`` accumulate). Norms, activations and elementwise adds
    are not counted.
    """
    rows: list[tuple[str, int]] = []
    d = config.prompt_dim
    if config.prompt_mode == "literal":
        rows.append(("prompt.conv1", _conv_macs(2 * d, 3, 1, 1, 1)))
        rows.append(("prompt.conv2", _conv_macs(d, 2 * d, 1, 1, 1)))
    else:
        h1, w1 = (h - 1) // 2 + 1, (w - 1) // 2 + 1
        h2, w2 = (h1 - 1) // 2 + 1, (w1 - 1) // 2 + 1
        rows.append(("prompt.conv1", _conv_macs(2 * d, 3, 3, h1, w1)))
        rows.append(("prompt.conv2", _conv_macs(d, 2 * d, 3, h2, w2)))

    def block(name, cin, cout, hh, ww):
        rows.append((f"{name}.conv1", _conv_macs(cout, cin, 3, hh, ww)))
        rows.append((f"{name}.conv2", _conv_macs(cout, cout, 3, hh, ww)))
        rows.append((f"{name}.mlp", cout * d))

    cin = config.in_channels
    hh, ww = h, w
    for lvl in range(config.levels):
        c = config.width(lvl)
        block(f"enc{lvl}", cin, c, hh, ww)
        if lvl < config.levels - 1:
            hh, ww = (hh - 1) // 2 + 1, (ww - 1) // 2 + 1
            rows.append((f"down{lvl}", _conv_macs(config.width(lvl + 1), c, 3, hh, ww)))
            cin = config.width(lvl + 1)
        else:
            cin = c
    block("mid", cin, cin, hh, ww)
    for lvl in range(config.levels - 2, -1, -1):
        c = config.width(lvl)
        hh, ww = hh * 2, ww * 2
        rows.append((f"fuse{lvl}", _conv_macs(c, config.width(lvl + 1) + c, 3, hh, ww)))
        block(f"dec{lvl}", c, c, hh, ww)
    rows.append(("out", _conv_macs(config.in_channels, config.base_channels, 3, h, w)))
    rows.append(("field", config.in_channels * d))
    rows.append(("euler", steps * 2 * config.in_channels * h * w))
    return rows


def count_params_macs(params: Params, config: ArchConfig, h: int, w: int, steps: int = 5) -> tuple[int, int]:
    """Learnable scalar count and per-frame MACs (see :func:`layer_macs`)."""
    return param_count(params), sum(m for _, m in layer_macs(config, h, w, steps))
