"""Dense float64 tensors with tape-based reverse-mode differentiation.

Activations use the N, C, H, W layout. Parameters may have fewer axes
(linear weights are 2-D, norm affine terms 1-D, gains are ``(1, 1, 1, 1)``).

Every op that touches a tensor with ``requires_grad`` records a node carrying
a monotonically increasing op index. ``backward`` collects the nodes reachable
from the loss and replays them in reverse index order, i.e. exact reverse
execution order. A recorded graph is single-use: once ``backward`` has run,
its nodes are released and a second pass raises :class:`GraphError`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .errors import GraphError, NumericalError, ShapeError

_op_counter = itertools.count()
_grad_enabled = True

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_index", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._index = -1
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((1,) * like.data.ndim, float(value)))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    out._index = next(_op_counter)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference, diagnostics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", _bw)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", _bw)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape(a, b)

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", _bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def _bw(g):
        _accumulate(a, g * s)

    return _make(a.data * s, (a,), "scale", _bw)


def arith(a: Tensor, b, kind: str) -> Tensor:
    """Dispatch to ``add``/``sub``/``mul``/``scale`` by name."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown arith kind {kind!r}")


def sum_all(a: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.array(a.data.sum()).reshape((1,) * max(a.data.ndim, 1)), (a,), "sum", _bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def _bw(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _make(np.array(a.data.mean()).reshape((1,) * max(a.data.ndim, 1)), (a,), "mean", _bw)


# ---------------------------------------------------------------- pointwise


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accumulate(x, g * (cdf + x.data * pdf))

    return _make(x.data * cdf, (x,), "gelu", _bw)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def _bw(g):
        _accumulate(x, g * y * (1.0 - y))

    return _make(y, (x,), "sigmoid", _bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient passes only where no clipping happened."""
    y = np.clip(x.data, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)

    def _bw(g):
        _accumulate(x, g * inside)

    return _make(y, (x,), "clamp", _bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def _bw(g):
        _accumulate(x, g * (1.0 - y * y))

    return _make(y, (x,), "tanh", _bw)


def exp_neg_scale(rate: float, t: float) -> float:
    """Decay factor ``exp(-rate * t)``; a constant with respect to any tensor."""
    return float(np.exp(-rate * t))


def pointwise(x: Tensor, kind: str, rate: float = 0.0, t: float = 0.0) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "exp_neg_scale":
        return scale(x, exp_neg_scale(rate, t))
    raise ValueError(f"unknown pointwise kind {kind!r}")


# ---------------------------------------------------------------- layers


def _out_extent(n: int, k: int, pad: int, stride: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} does not fit extent {n} with padding {pad}")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int) -> np.ndarray:
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    view = as_strided(xp, shape=(n, c, kh, kw, ho, wo), strides=(sn, sc, sh, sw, sh * stride, sw * stride))
    return view.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    Output extent is ``(H + 2*padding - kh) // stride + 1``. Lowered to one
    batched GEMM over an im2col buffer, which is kept for the backward pass.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"input has {cin} channels but weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel extents must be odd")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    ho = _out_extent(h, kh, padding, stride)
    wo = _out_extent(w, kw, padding, stride)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, ho, wo, stride)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def _bw(g):
        g2 = g.reshape(n, cout, ho * wo)
        if weight.requires_grad:
            _accumulate(weight, np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            # input grad = stride-1 correlation of the dilated, fully padded
            # output grad with the flipped, channel-transposed kernel
            if stride == 1:
                gd = g
            else:
                gd = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
                gd[:, :, ::stride, ::stride] = g
            hu, wu = gd.shape[2] + kh - 1, gd.shape[3] + kw - 1
            gdp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            wt = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
            gx = np.matmul(wt, _im2col(gdp, kh, kw, hu, wu, 1)).reshape(n, cin, hu, wu)
            if (hu, wu) != xp.shape[2:]:
                full = np.zeros(xp.shape)
                full[:, :, :hu, :wu] = gx
                gx = full
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
            _accumulate(x, gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, "conv2d", _bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dense map on ``(N, Cin, 1, 1)`` features; weight is ``(Cout, Cin)``."""
    if x.data.ndim != 4 or x.shape[2:] != (1, 1):
        raise ShapeError(f"linear expects (N, C, 1, 1) input, got {x.shape}")
    n, cin = x.shape[:2]
    if weight.data.ndim != 2 or weight.shape[1] != cin:
        raise ShapeError(f"weight shape {weight.shape} incompatible with {cin} input features")
    flat = x.data.reshape(n, cin)
    out = flat @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        g2 = g.reshape(n, -1)
        if weight.requires_grad:
            _accumulate(weight, g2.T @ flat)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, (g2 @ weight.data).reshape(x.shape))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out.reshape(n, -1, 1, 1), parents, "linear", _bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("gamma/beta must have one entry per channel")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def _bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
            _accumulate(x, dx.reshape(x.shape))

    return _make(out, (x, gamma, beta), "group_norm", _bw)


def spatial_mean(x: Tensor) -> Tensor:
    n, c, h, w = x.shape

    def _bw(g):
        _accumulate(x, np.broadcast_to(g / (h * w), x.shape))

    return _make(x.data.mean(axis=(2, 3), keepdims=True), (x,), "spatial_mean", _bw)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if factor < 2:
        raise ShapeError(f"upsample factor must be >= 2, got {factor}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _bw(g):
        _accumulate(x, g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return _make(out, (x,), "upsample", _bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]

    def _bw(g):
        _accumulate(a, g[:, :ca])
        _accumulate(b, g[:, ca:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), "concat", _bw)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at zero is taken as zero."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size

    def _bw(g):
        sgn = np.sign(diff) * (g.reshape(()) / count)
        _accumulate(pred, sgn)
        _accumulate(target, -sgn)

    value = np.abs(diff).mean().reshape(1, 1, 1, 1)
    return _make(value, (pred, target), "l1_loss", _bw)


# ---------------------------------------------------------------- backward


def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._consumed:
            raise GraphError(f"graph through {t._op} (op #{t._index}) was already consumed by backward")
        if t._backward is not None:
            nodes.append(t)
            stack.extend(t._parents)
    nodes.sort(key=lambda t: t._index)
    return nodes


def backward(loss: Tensor) -> list[Tensor]:
    """Propagate d(loss) to every reachable leaf with ``requires_grad``.

    Leaf gradients accumulate across calls until cleared. Returns the replayed
    ops in the order they were visited (reverse execution order).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("graph already consumed; re-run the forward pass")
    if not loss.requires_grad:
        return []
    nodes = _collect(loss)
    loss.grad = np.ones_like(loss.data)
    visited: list[Tensor] = []
    for node in reversed(nodes):
        g = node.grad if node.grad is not None else np.zeros_like(node.data)
        node._backward(g)
        visited.append(node)
    for node in nodes:
        node._backward = None
        node._parents = ()
        node._consumed = True
        node.grad = None
    return visited


def finite_diff_check(
    f: Callable[[], Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between backward grads and central differences.

    ``f`` takes no arguments and rebuilds the scalar output from the current
    contents of ``x`` (one tensor or a list of them). With ``max_coords`` set,
    that many coordinates are sampled uniformly across all tensors; otherwise
    every coordinate is checked. Relative error uses the denominator
    ``max(|a|, |b|, 1e-8)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = f()
    backward(out)
    analytic = [t.grad.copy() for t in xs]

    coords = [(k, i) for k, t in enumerate(xs) for i in range(t.data.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[p] for p in sorted(pick)]

    worst = 0.0
    for k, i in coords:
        flat = xs[k].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic[k].reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
