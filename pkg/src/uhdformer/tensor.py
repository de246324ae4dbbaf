"""Rank-4 tensors with a single-use reverse-mode tape.

Every tensor is ``(batch, channel, row, col)`` and row-major. Matrices are
carried as ``(n, m, p, q)`` stacks so that attention can batch over
``(sample, head)`` without a second tensor type.

Recording works like this::

    with Tape() as tape:
        loss = some_function(params, x)
    tape.backward(loss)
    g = tape.grad(params[0])

Ops only record when a tape is active and at least one input is a leaf with
``requires_grad`` or a value produced on that same tape.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ChannelIndexError, ContractError, ShapeError, SizeError
from .rng import Rng

DTYPES = {"f32": np.float32, "f64": np.float64}
_MAX_ELEMENTS = 1 << 40

# names of backward formulas to corrupt; only the self-test negative control writes this
_FAULTS: set[str] = set()


def _faulty(name: str) -> bool:
    return name in _FAULTS


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64, np.longdouble):
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._node = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)


@dataclass
class ComplexPair:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError(f"re/im shapes differ: {self.re.shape} vs {self.im.shape}")


# ---------------------------------------------------------------- construction


def _check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(e) for e in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected 4 extents, got {shape}")
    if any(e < 0 for e in shape):
        raise ShapeError(f"negative extent in {shape}")
    if math.prod(shape) > _MAX_ELEMENTS:
        raise SizeError(f"shape {shape} exceeds the addressable element count")
    return shape


def zeros(shape, dtype=np.float64, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype), requires_grad, name)


def full(shape, value: float, dtype=np.float64, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype), requires_grad, name)


def uniform(shape, rng: Rng, lo: float = 0.0, hi: float = 1.0, dtype=np.float64,
            requires_grad=False, name=None) -> Tensor:
    shape = _check_shape(shape)
    vals = rng.uniform_array(math.prod(shape), lo, hi).reshape(shape)
    return Tensor(vals.astype(dtype), requires_grad, name)


def normal(shape, rng: Rng, mean: float = 0.0, std: float = 1.0, dtype=np.float64,
           requires_grad=False, name=None) -> Tensor:
    shape = _check_shape(shape)
    vals = rng.normal_array(math.prod(shape), mean, std).reshape(shape)
    return Tensor(vals.astype(dtype), requires_grad, name)


# ---------------------------------------------------------------------- tape

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_record():
    """Suspend recording, e.g. for evaluation inside a training step."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


class _Node:
    __slots__ = ("inputs", "backward", "shape", "dtype", "leaf")

    def __init__(self, inputs, backward, shape, dtype, leaf=None):
        self.inputs = inputs
        self.backward = backward
        self.shape = shape
        self.dtype = dtype
        self.leaf = leaf


class Tape:
    """Append-only record of primitive ops; backward may run once."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: list[np.ndarray | None] = []
        self._leaf_ids: dict[int, int] = {}
        self._done = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def _handle(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        if not t.requires_grad:
            return None
        idx = self._leaf_ids.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self.nodes.append(_Node((), None, t.shape, t.dtype, leaf=t))
            self._leaf_ids[id(t)] = idx
        return idx

    def record(self, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        if self._done:
            raise ContractError("tape already consumed by backward; start a new tape")
        handles = tuple(self._handle(t) for t in inputs)
        result = Tensor(out)
        if all(h is None for h in handles):
            return result
        result._tape = self
        result._node = len(self.nodes)
        self.nodes.append(_Node(handles, backward, out.shape, out.dtype))
        return result

    def backward(self, loss: Tensor) -> None:
        if self._done:
            raise ContractError("backward already ran on this tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        self._done = True
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss._node] = np.ones(loss.shape, dtype=loss.dtype)
        for i in range(loss._node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for h, gi in zip(node.inputs, in_grads):
                if h is None or gi is None:
                    continue
                if gi.shape != self.nodes[h].shape:
                    raise ContractError(f"gradient shape {gi.shape} != value shape {self.nodes[h].shape}")
                grads[h] = gi if grads[h] is None else grads[h] + gi
        self.grads = grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient of the loss w.r.t. ``t``; None if ``t`` never appeared on this tape.

        A recorded tensor with no differentiable path to the loss (for example
        one that only steers a discrete channel choice) gets zeros.
        """
        if not self._done:
            raise ContractError("call backward before reading gradients")
        if t._tape is self:
            idx = t._node
        else:
            idx = self._leaf_ids.get(id(t))
            if idx is None:
                return None
        g = self.grads[idx]
        if g is None:
            node = self.nodes[idx]
            g = np.zeros(node.shape, dtype=node.dtype)
        return g

    def leaves(self) -> list[Tensor]:
        return [n.leaf for n in self.nodes if n.leaf is not None]


def _record(out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    if tape is None:
        return Tensor(out)
    return tape.record(out, inputs, backward)


# ---------------------------------------------------------------- elementwise


def _same_shape(x: Tensor, y: Tensor, what: str):
    if x.shape != y.shape:
        raise ShapeError(f"{what}: shapes differ {x.shape} vs {y.shape}")


def add(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "add")
    return _record(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "sub")
    return _record(x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y, "mul")
    a, b = x.data, y.data
    return _record(a * b, (x, y), lambda g: (g * b, g * a))


def elementwise(x: Tensor, y: Tensor, op: str) -> Tensor:
    if op == "add":
        return add(x, y)
    if op == "mul":
        return mul(x, y)
    raise ValueError(f"unknown elementwise op {op!r}")


def mul_scalar(x: Tensor, c: float) -> Tensor:
    return _record(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def _check_scale(x: Tensor, alpha: Tensor):
    a = alpha.shape
    if a[0] != 1 or a[2] != 1 or a[3] != 1 or a[1] not in (1, x.shape[1]):
        raise ShapeError(f"scale factor must be (1,1,1,1) or (1,{x.shape[1]},1,1), got {a}")


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """``x * alpha`` for a scalar or per-channel (axis 1) factor."""
    _check_scale(x, alpha)
    a, xd = alpha.data, x.data

    def backward(g):
        ga = (g * xd).sum(axis=(0, 2, 3), keepdims=True)
        if a.shape[1] == 1:
            ga = ga.sum(axis=1, keepdims=True)
        return g * a, ga

    return _record(xd * a, (x, alpha), backward)


def scale_div(x: Tensor, alpha: Tensor, floor: float = 1e-8) -> Tensor:
    """``x / alpha`` with ``|alpha|`` floored at ``floor`` (sign kept, 0 -> +floor)."""
    _check_scale(x, alpha)
    a = alpha.data
    clipped = np.abs(a) < floor
    denom = np.where(clipped, np.where(a < 0, -floor, floor), a).astype(a.dtype)
    xd = x.data
    out = xd / denom

    def backward(g):
        ga = -(g * xd).sum(axis=(0, 2, 3), keepdims=True) / (denom * denom)
        if a.shape[1] == 1:
            ga = ga.sum(axis=1, keepdims=True)
        ga = np.where(clipped, 0.0, ga).astype(a.dtype)
        return g / denom, ga

    return _record(out, (x, alpha), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximate GELU: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner
        if _faulty("gelu"):
            d = -d
        return (g * d,)

    return _record(out, (x,), backward)


def abs_(x: Tensor) -> Tensor:
    """|x|; the derivative at exactly 0 is taken as 0."""
    xd = x.data
    return _record(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(1, 1, 1, 1)
    return _record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = max(x.size, 1)
    shape = x.shape
    out = np.asarray(x.data.sum() / n, dtype=x.dtype).reshape(1, 1, 1, 1)
    return _record(out, (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _record(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


# ------------------------------------------------------------- convolution


def _pad(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0,
           groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding.

    ``w`` is ``(out_c, in_c/groups, kh, kw)`` and ``b`` holds ``out_c`` values
    (any rank-4 shape of that size, usually ``(1, out_c, 1, 1)``).
    """
    n, c, h, wd = x.shape
    oc, icg, kh, kw = w.shape
    if stride < 1 or pad < 0 or groups < 1:
        raise ShapeError(f"bad conv geometry stride={stride} pad={pad} groups={groups}")
    if c % groups or oc % groups or icg != c // groups:
        raise ShapeError(f"conv2d: in_c={c}, out_c={oc}, groups={groups}, weight {w.shape}")
    if b is not None and b.size != oc:
        raise ShapeError(f"conv2d: bias has {b.size} values, need {oc}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: empty output for input {x.shape} and kernel {w.shape}")

    xd, wdat = x.data, w.data
    ocg = oc // groups
    inputs = (x, w) if b is None else (x, w, b)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0 and groups == 1:
        w2 = wdat.reshape(oc, c)
        xf = xd.reshape(n, c, h * wd)
        out = np.matmul(w2, xf).reshape(n, oc, h, wd)

        def backward(g):
            gf = g.reshape(n, oc, h * wd)
            gx = np.matmul(w2.T, gf).reshape(xd.shape)
            gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0).reshape(wdat.shape)
            return _with_bias_grad(g, gx, gw, b)

    elif groups == c and ocg == 1 and stride == 1:
        # depthwise: accumulate one shifted slice per kernel tap
        xp = _pad(xd, pad)
        out = np.zeros((n, oc, oh, ow), dtype=xd.dtype)
        taps = wdat[:, 0]
        for i in range(kh):
            for j in range(kw):
                out += xp[:, :, i:i + oh, j:j + ow] * taps[:, i, j][None, :, None, None]

        def backward(g):
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wdat)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + oh, j:j + ow] += g * taps[:, i, j][None, :, None, None]
                    gw[:, 0, i, j] = (g * xp[:, :, i:i + oh, j:j + ow]).sum(axis=(0, 2, 3))
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            return _with_bias_grad(g, np.ascontiguousarray(gx), gw, b)

    else:
        xp = _pad(xd, pad)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win.reshape(n, groups, icg, oh, ow, kh, kw)
        wg = wdat.reshape(groups, ocg, icg, kh, kw)
        out = np.einsum("ngcyxij,gocij->ngoyx", win, wg, optimize=True).reshape(n, oc, oh, ow)

        def backward(g):
            gg = g.reshape(n, groups, ocg, oh, ow)
            gw = np.einsum("ngoyx,ngcyxij->gocij", gg, win, optimize=True).reshape(wdat.shape)
            # column gradient, then fold taps back onto the padded input
            gcols = np.einsum("ngoyx,gocij->ngcijyx", gg, wg, optimize=True)
            gxp = np.zeros_like(xp)
            gxp_g = gxp.reshape(n, groups, icg, *xp.shape[2:])
            for i in range(kh):
                for j in range(kw):
                    gxp_g[:, :, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            return _with_bias_grad(g, np.ascontiguousarray(gx), gw, b)

    if b is not None:
        out = out + b.data.reshape(1, oc, 1, 1)
    return _record(out, inputs, backward)


def _with_bias_grad(g, gx, gw, b):
    if _faulty("conv2d"):
        gw = -gw
    if b is None:
        return gx, gw
    gb = g.sum(axis=(0, 2, 3)).reshape(b.shape)
    return gx, gw, gb


# --------------------------------------------------------- normalisation


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise across channels at every ``(n, row, col)`` position (population variance)."""
    c = x.shape[1]
    if gamma.size != c or beta.size != c:
        raise ShapeError(f"layer_norm: need {c} affine values, got {gamma.size}/{beta.size}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    gm = gamma.data.reshape(1, c, 1, 1)
    bt = beta.data.reshape(1, c, 1, 1)
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gm + bt

    def backward(g):
        ggam = (g * xhat).sum(axis=(0, 2, 3)).reshape(gamma.shape)
        gbet = g.sum(axis=(0, 2, 3)).reshape(beta.shape)
        dxhat = g * gm
        gx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        if _faulty("layer_norm"):
            gx = -gx
        return gx, ggam, gbet

    return _record(out, (x, gamma, beta), backward)


_AXES = {"channel": 1, "last": 3}


def softmax(x: Tensor, axis: str = "last") -> Tensor:
    ax = _AXES[axis]
    xd = x.data
    e = np.exp(xd - xd.max(axis=ax, keepdims=True))
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        gx = out * (g - (g * out).sum(axis=ax, keepdims=True))
        if _faulty("softmax"):
            gx = -gx
        return (gx,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------- rearrangement


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    """``(n,c,h,w) -> (n, c*s*s, h/s, w/s)``.

    Output channel ``ci*s*s + dy*s + dx`` holds input channel ``ci`` at
    sub-pixel offset ``(dy, dx)``.
    """
    n, c, h, w = x.shape
    if s < 1 or h % s or w % s:
        raise ShapeError(f"pixel_unshuffle: {h}x{w} not divisible by {s}")
    out = (x.data.reshape(n, c, h // s, s, w // s, s)
           .transpose(0, 1, 3, 5, 2, 4).reshape(n, c * s * s, h // s, w // s))

    def backward(g):
        return (g.reshape(n, c, s, s, h // s, w // s).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w),)

    return _record(np.ascontiguousarray(out), (x,), backward)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Exact inverse of :func:`pixel_unshuffle`."""
    n, cs, h, w = x.shape
    if s < 1 or cs % (s * s):
        raise ShapeError(f"pixel_shuffle: {cs} channels not divisible by {s * s}")
    c = cs // (s * s)
    out = x.data.reshape(n, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * s, w * s)

    def backward(g):
        return (g.reshape(n, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(n, cs, h, w),)

    return _record(np.ascontiguousarray(out), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(e) for e in shape)
    if len(shape) != 4 or math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _record(np.ascontiguousarray(x.data.swapaxes(2, 3)), (x,),
                   lambda g: (np.ascontiguousarray(g.swapaxes(2, 3)),))


def window_argmax(x: Tensor, k: int) -> np.ndarray:
    """Row-major position of the first maximum in each ``k x k`` window."""
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"pool2d: {h}x{w} not divisible by {k}")
    blocks = x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, h // k, w // k, k * k).argmax(axis=-1)


def pool2d(x: Tensor, kind: str, k: int, argmax: np.ndarray | None = None) -> Tensor:
    """Non-overlapping ``k x k`` max or mean pooling (stride = k).

    Max-pool ties send the gradient to the first maximum in row-major order.
    ``argmax`` overrides the window choice (as from :func:`window_argmax`).
    """
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"pool2d: {h}x{w} not divisible by {k}")
    oh, ow = h // k, w // k
    blocks = x.data.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    if kind == "mean":
        out = blocks.mean(axis=-1)

        def backward(g):
            gb = np.broadcast_to((g / (k * k))[:, :, :, None, :, None], (n, c, oh, k, ow, k))
            return (gb.reshape(n, c, h, w).copy(),)

    elif kind == "max":
        arg = blocks.argmax(axis=-1) if argmax is None else argmax  # first occurrence on ties
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            gb = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
            np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
            gx = gb.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (gx,)

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return _record(np.ascontiguousarray(out), (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes: ``(n,m,p,q) @ (n,m,q,r)``."""
    if a.shape[:2] != b.shape[:2] or a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return np.matmul(g, bd.swapaxes(2, 3)), np.matmul(ad.swapaxes(2, 3), g)

    return _record(np.matmul(ad, bd), (a, b), backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for t in xs:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not match {(n, '*', h, w)}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=1)

    def backward(g):
        return tuple(np.ascontiguousarray(g[:, bounds[i]:bounds[i + 1]]) for i in range(len(xs)))

    return _record(out, tuple(xs), backward)


def _slice_channels(x: Tensor, lo: int, hi: int) -> Tensor:
    xd = x.data

    def backward(g):
        gx = np.zeros_like(xd)
        gx[:, lo:hi] = g
        return (gx,)

    return _record(np.ascontiguousarray(xd[:, lo:hi]), (x,), backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[1] or any(s < 0 for s in sizes):
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not sum to {x.shape[1]}")
    out, lo = [], 0
    for s in sizes:
        out.append(_slice_channels(x, lo, lo + s))
        lo += s
    return out


def gather_channels(x: Tensor, idx) -> Tensor:
    """Per-sample channel gather: output ``[i, j] = x[i, idx[i, j]]``.

    Gradients scatter-add back, so duplicate indices accumulate.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n, c, h, w = x.shape
    if idx.ndim != 2 or idx.shape[0] != n:
        raise ShapeError(f"gather_channels: index array {idx.shape} for batch {n}")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ChannelIndexError(f"channel index out of range [0, {c})")
    rows = np.arange(n)[:, None]
    out = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _record(np.ascontiguousarray(out), (x,), backward)


def index_select_channels(x: Tensor, idx: Sequence[int]) -> Tensor:
    """Same channel list for every sample: output channel ``j`` is input channel ``idx[j]``."""
    idx = np.asarray(list(idx), dtype=np.int64)
    return gather_channels(x, np.broadcast_to(idx, (x.shape[0], idx.size)))


# ------------------------------------------------------------------ spectral


def _dft_mats(k: int):
    m = np.arange(k)
    ang = 2.0 * math.pi * (np.outer(m, m) % k) / k  # reduce the integer phase first
    return np.cos(ang), np.sin(ang)


def dft2(x: Tensor) -> ComplexPair:
    """Full 2-D DFT of every ``(n, c)`` plane, ``F[u,v] = sum x[m,l] e^{-2pi i (um/H + vl/W)}``.

    Evaluated as dense separable DFT matrices; returns real and imaginary parts.
    """
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeError("dft2 needs non-empty planes")
    ch, sh = _dft_mats(h)
    cw, sw = _dft_mats(w)
    xd = x.data.astype(np.float64)
    xc = xd @ cw
    xs = xd @ sw
    re = ch @ xc - sh @ xs
    im = -(sh @ xc + ch @ xs)
    dt = x.dtype

    # the transform matrices are symmetric, so each adjoint reuses them unchanged
    def backward_re(g):
        g = g.astype(np.float64)
        return ((ch @ g @ cw - sh @ g @ sw).astype(dt),)

    def backward_im(g):
        g = g.astype(np.float64)
        return ((-(sh @ g @ cw) - ch @ g @ sw).astype(dt),)

    return ComplexPair(_record(re.astype(dt), (x,), backward_re), _record(im.astype(dt), (x,), backward_im))


# --------------------------------------------------------------- gradcheck


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               coords: Sequence[int] | None = None, *, fd_dtype=None,
               carry: Sequence[Tensor] = ()) -> float:
    """Largest relative error between tape and central-difference gradients.

    ``x`` is perturbed in place (and restored), so ``f`` may close over it
    directly; this is how parameters inside a block are checked. ``coords``
    restricts the check to a subset of flat indices.

    The tape gradient is always taken at float64. With ``fd_dtype`` (for
    instance ``np.longdouble``) the difference quotients are evaluated with
    ``x`` and every tensor in ``carry`` cast to that type, which lowers the
    round-off floor of the reference for coordinates with tiny gradients.
    """
    if x.dtype != np.float64:
        raise ContractError("grad_check requires float64 inputs")
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            loss = f(x)
        tape.backward(loss)
        analytic = tape.grad(x)
    finally:
        x.requires_grad = was
    analytic = np.zeros_like(x.data) if analytic is None else analytic
    lifted = [x, *(t for t in carry if t is not x)]
    saved = [t.data for t in lifted]
    if fd_dtype is not None:
        for t in lifted:
            t.data = t.data.astype(fd_dtype)
    try:
        flat = x.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        if coords is None:
            coords = range(flat.size)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).data.reshape(-1)[0]
            flat[i] = orig - eps
            fm = f(x).data.reshape(-1)[0]
            flat[i] = orig
            num = float((fp - fm) / (2 * eps))
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    finally:
        for t, d in zip(lifted, saved):
            t.data = d
    return worst
