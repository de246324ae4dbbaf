"""Parameterised building blocks of the dual-space restoration network."""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor


class Block:
    """Parameter container; parameters and children are discovered in assignment order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Block):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Block):
                for i, child in enumerate(val):
                    yield from child.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv(Block):
    def __init__(self, in_c: int, out_c: int, k: int, rng: Rng, groups: int = 1,
                 dtype=np.float32):
        if k % 2 == 0:
            raise ConfigError("only odd kernels are supported ('same' padding)")
        fan_in = (in_c // groups) * k * k
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = T.uniform((out_c, in_c // groups, k, k), rng, -bound, bound, dtype, True)
        self.bias = T.uniform((1, out_c, 1, 1), rng, -bound, bound, dtype, True)
        self.groups = groups
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, 1, self.pad, self.groups)

    def zero_(self):
        self.weight.data[...] = 0
        self.bias.data[...] = 0


def pointwise(in_c, out_c, rng, dtype):
    return Conv(in_c, out_c, 1, rng, dtype=dtype)


def depthwise(c, k, rng, dtype):
    return Conv(c, c, k, rng, groups=c, dtype=dtype)


class Norm(Block):
    def __init__(self, c: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = T.full((1, c, 1, 1), 1.0, dtype, True)
        self.beta = T.zeros((1, c, 1, 1), dtype, True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def _check_channels(x: Tensor, c: int, who: str):
    if x.shape[1] != c:
        raise ShapeError(f"{who}: expected {c} channels, got {x.shape[1]}")


class ConvNeXtBlock(Block):
    """``x + pw2(gelu(pw1(norm(dw7x7(x)))))`` with a 4x hidden width."""

    def __init__(self, c: int, rng: Rng, dtype=np.float32):
        self.dw = depthwise(c, 7, rng, dtype)
        self.norm = Norm(c, dtype)
        self.pw1 = pointwise(c, 4 * c, rng, dtype)
        self.pw2 = pointwise(4 * c, c, rng, dtype)
        self.c = c

    def __call__(self, x: Tensor) -> Tensor:
        _check_channels(x, self.c, "ConvNeXtBlock")
        return x + self.pw2(T.gelu(self.pw1(self.norm(self.dw(x)))))


class ACMBlock(Block):
    """Adaptive channel modulation of three same-width feature levels.

    The concatenation is expanded to 6C, split into a channel-softmax weight
    map and an additive offset, and both are applied to the concatenation.
    """

    def __init__(self, c: int, rng: Rng, dtype=np.float32):
        self.pw = pointwise(3 * c, 6 * c, rng, dtype)
        self.dw = depthwise(6 * c, 3, rng, dtype)
        self.c = c

    def __call__(self, x1: Tensor, x2: Tensor, x3: Tensor) -> Tensor:
        if not (x1.shape == x2.shape == x3.shape):
            raise ShapeError(f"ACM inputs differ: {x1.shape}, {x2.shape}, {x3.shape}")
        _check_channels(x1, self.c, "ACMBlock")
        xc = T.concat_channels([x1, x2, x3])
        z1, z2 = T.split_channels(self.dw(self.pw(xc)), [3 * self.c, 3 * self.c])
        return xc * T.softmax(z1, "channel") + z2


# ------------------------------------------------------- correlation matching


@dataclass
class SelectionResult:
    selected: Tensor
    indices: np.ndarray     # (n, C/r) int, per sample
    similarity: np.ndarray  # (n, C, C) cosine matrix
    top1: np.ndarray        # (n, C) row maxima


class SelectionLog:
    """Discrete choices (top-k channels, max-pool positions) recorded on a first
    pass and replayed afterwards, in call order."""

    def __init__(self):
        self.choices: list[np.ndarray] = []
        self.pos = 0

    def pick(self, order: np.ndarray) -> np.ndarray:
        if self.pos < len(self.choices):
            order = self.choices[self.pos]
        else:
            self.choices.append(order)
        self.pos += 1
        return order

    def wrap(self, f):
        """``f`` with the replay cursor rewound before every call."""
        def run(*args, **kwargs):
            self.pos = 0
            return f(*args, **kwargs)
        return run


_sel = threading.local()


@contextmanager
def frozen_selection():
    """Hold every top-k channel and max-pool choice fixed across repeated evaluations.

    Finite-difference checks need this: a perturbation that flips a discrete
    choice changes the function being differentiated. Evaluate through
    ``log.wrap(f)`` so each call replays from the start.
    """
    prev = getattr(_sel, "log", None)
    _sel.log = SelectionLog()
    try:
        yield _sel.log
    finally:
        _sel.log = prev


def _replay(choice: np.ndarray) -> np.ndarray:
    log = getattr(_sel, "log", None)
    return choice if log is None else log.pick(choice)


def cosine_matrix(r1: np.ndarray, r2: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Per-sample ``(C, C)`` cosine similarity between flattened channels.

    Zero-norm channels get similarity 0 against everything. Always float64.
    """
    n, c = r1.shape[:2]
    a = r1.reshape(n, c, -1).astype(np.float64)
    b = r2.reshape(n, r2.shape[1], -1).astype(np.float64)
    na = np.sqrt((a * a).sum(-1))
    nb = np.sqrt((b * b).sum(-1))
    dots = np.matmul(a, b.transpose(0, 2, 1))
    denom = na[:, :, None] * nb[:, None, :]
    return np.where(denom > eps, dots / np.maximum(denom, eps), 0.0)


def cmt_select(r1: Tensor, r2: Tensor, r: int) -> SelectionResult:
    """Keep the ``C/r`` channels of ``r1`` whose best match in ``r2`` is strongest.

    Channels are ranked by their row maximum of the cosine matrix, descending,
    ties going to the lower channel index.
    """
    if r1.shape != r2.shape:
        raise ShapeError(f"cmt_select: {r1.shape} vs {r2.shape}")
    c = r1.shape[1]
    if r < 1 or c % r:
        raise ConfigError(f"squeezing factor {r} must divide channel count {c}")
    k = c // r
    sim = cosine_matrix(r1.data, r2.data)
    top1 = sim.max(axis=2) if c else np.zeros((r1.shape[0], 0))
    order = np.argsort(-top1, axis=1, kind="stable")[:, :k]

    order = _replay(order)
    return SelectionResult(T.gather_channels(r1, order), order, sim, top1)


def max_pool(x: Tensor, k: int) -> Tensor:
    """``k x k`` max pooling whose window choices respect :func:`frozen_selection`."""
    return T.pool2d(x, "max", k, _replay(T.window_argmax(x, k)))


class GFRBlock(Block):
    """Gated refinement: ``out_pw(pw2(dw(pw1(y))) * y)``, width ``cin -> c_out``."""

    def __init__(self, cin: int, c_out: int, rng: Rng, dtype=np.float32):
        self.inner_pw1 = pointwise(cin, cin, rng, dtype)
        self.inner_dw = depthwise(cin, 3, rng, dtype)
        self.inner_pw2 = pointwise(cin, cin, rng, dtype)
        self.out_pw = pointwise(cin, c_out, rng, dtype)
        self.cin = cin

    def __call__(self, y: Tensor) -> Tensor:
        _check_channels(y, self.cin, "GFRBlock")
        gate = self.inner_pw2(self.inner_dw(self.inner_pw1(y)))
        return self.out_pw(gate * y)


class DualCMTBlock(Block):
    """Max/mean-pooled high-resolution features, matched against ``y``, refined by GFR."""

    def __init__(self, c: int, r: int, s: int, rng: Rng, use_max: bool = True,
                 use_mean: bool = True, dtype=np.float32):
        if r < 1 or c % r:
            raise ConfigError(f"squeezing factor {r} must divide C={c}")
        if not (use_max or use_mean):
            raise ConfigError("DualCMT needs at least one pooling branch")
        self.proj = pointwise(3 * c, c, rng, dtype)
        branches = int(use_max) + int(use_mean)
        self.gfr = GFRBlock(branches * c // r, c, rng, dtype)
        self.c, self.r, self.s = c, r, s
        self.use_max, self.use_mean = use_max, use_mean

    def __call__(self, x_acm: Tensor, y: Tensor) -> Tensor:
        _check_channels(x_acm, 3 * self.c, "DualCMT (x_acm)")
        _check_channels(y, self.c, "DualCMT (y)")
        n, _, H, W = x_acm.shape
        if H % self.s or W % self.s:
            raise ShapeError(f"DualCMT: {H}x{W} not divisible by {self.s}")
        if y.shape[2:] != (H // self.s, W // self.s):
            raise ShapeError(f"DualCMT: low-res {y.shape[2:]} vs high-res {H}x{W} / {self.s}")
        y_hat = self.proj(x_acm)
        picked = []
        if self.use_max:
            picked.append(cmt_select(max_pool(y_hat, self.s), y, self.r).selected)
        if self.use_mean:
            picked.append(cmt_select(T.pool2d(y_hat, "mean", self.s), y, self.r).selected)
        return self.gfr(T.concat_channels(picked))


class CMTABlock(Block):
    """Channel (transposed) attention whose query comes from DualCMT.

    Per head, the ``d x d`` map ``softmax(Q K^T / alpha)`` over ``d = C/heads``
    channels mixes the value channels; ``alpha`` is a learnable per-head
    divisor with a 1e-8 magnitude floor.
    """

    def __init__(self, c: int, heads: int, r: int, s: int, rng: Rng, use_dualcmt: bool = True,
                 use_max: bool = True, use_mean: bool = True, dtype=np.float32):
        if heads < 1 or c % heads:
            raise ConfigError(f"heads={heads} must divide C={c}")
        self.qkv_pw = pointwise(c, 3 * c, rng, dtype)
        self.qkv_dw = depthwise(3 * c, 3, rng, dtype)
        self.dualcmt = DualCMTBlock(c, r, s, rng, use_max, use_mean, dtype) if use_dualcmt else None
        self.alpha = T.full((1, heads, 1, 1), 1.0, dtype, True)
        self.out_pw = pointwise(c, c, rng, dtype)
        self.c, self.heads = c, heads

    def attention_weights(self, q: Tensor, k: Tensor) -> Tensor:
        n, c, h, w = q.shape
        d = c // self.heads
        qh = T.reshape(q, (n, self.heads, d, h * w))
        kh = T.reshape(k, (n, self.heads, d, h * w))
        return T.softmax(T.scale_div(T.matmul(qh, T.transpose(kh)), self.alpha), "last")

    def __call__(self, x_low: Tensor, x_acm: Tensor) -> Tensor:
        _check_channels(x_low, self.c, "CMTABlock")
        n, c, h, w = x_low.shape
        q, k, v = T.split_channels(self.qkv_dw(self.qkv_pw(x_low)), [c, c, c])
        if self.dualcmt is not None:
            q = self.dualcmt(x_acm, q)
        attn = self.attention_weights(q, k)
        vh = T.reshape(v, (n, self.heads, c // self.heads, h * w))
        out = T.reshape(T.matmul(attn, vh), (n, c, h, w))
        return self.out_pw(out)


class CMTNBlock(Block):
    """Forward network: ``dualcmt(x_acm, dw(pw(x)))`` (or just ``dw(pw(x))`` when disabled)."""

    def __init__(self, c: int, r: int, s: int, rng: Rng, use_dualcmt: bool = True,
                 use_max: bool = True, use_mean: bool = True, dtype=np.float32):
        self.pw = pointwise(c, c, rng, dtype)
        self.dw = depthwise(c, 3, rng, dtype)
        self.dualcmt = DualCMTBlock(c, r, s, rng, use_max, use_mean, dtype) if use_dualcmt else None
        self.c = c

    def __call__(self, x: Tensor, x_acm: Tensor) -> Tensor:
        _check_channels(x, self.c, "CMTNBlock")
        feat = self.dw(self.pw(x))
        if self.dualcmt is None:
            return feat
        return self.dualcmt(x_acm, feat)


class CMTTBBlock(Block):
    """Pre-norm transformer block: attention then forward network, both residual."""

    def __init__(self, c: int, heads: int, r: int, s: int, rng: Rng, dualcmt_in_attn: bool = True,
                 dualcmt_in_ffn: bool = True, use_max: bool = True, use_mean: bool = True,
                 dtype=np.float32):
        self.ln1 = Norm(c, dtype)
        self.attn = CMTABlock(c, heads, r, s, rng, dualcmt_in_attn, use_max, use_mean, dtype)
        self.ln2 = Norm(c, dtype)
        self.ffn = CMTNBlock(c, r, s, rng, dualcmt_in_ffn, use_max, use_mean, dtype)

    def __call__(self, x_low: Tensor, x_acm: Tensor) -> Tensor:
        x_mid = self.attn(self.ln1(x_low), x_acm) + x_low
        return self.ffn(self.ln2(x_mid), x_acm) + x_mid

    def final_projections(self) -> list[Conv]:
        """Convs whose zeroing turns this block into the identity."""
        last_ffn = self.ffn.dualcmt.gfr.out_pw if self.ffn.dualcmt is not None else self.ffn.dw
        return [self.attn.out_pw, last_ffn]
