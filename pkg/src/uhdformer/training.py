"""Loss, optimiser, schedule, synthetic degradations and the train/eval loops."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericalError, ShapeError, SizeError
from .metrics import psnr, ssim
from .model import UHDformer, save_checkpoint
from .rng import Rng, substream
from .tensor import Tensor

# ---------------------------------------------------------------------- loss


def restoration_loss(pred: Tensor, target: Tensor, freq_weight: float = 0.1) -> Tensor:
    """Mean absolute error plus ``freq_weight`` times the mean spectral L1.

    The spectral term is ``mean(|Re dF| + |Im dF|)`` over all DFT bins, with
    ``dF = DFT(pred) - DFT(target)`` (computed as the DFT of the difference).
    """
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    diff = T.sub(pred, target)
    spatial = T.mean_all(T.abs_(diff))
    if freq_weight == 0:
        return spatial
    spec = T.dft2(diff)
    freq = T.mean_all(T.add(T.abs_(spec.re), T.abs_(spec.im)))
    return T.add(spatial, T.mul_scalar(freq, freq_weight))


# ----------------------------------------------------------------- optimiser


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    @classmethod
    def for_registry(cls, registry: dict[str, Tensor], **hyper) -> "AdamWState":
        st = cls(**hyper)
        for name, p in registry.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adamw_step(registry: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float) -> None:
    """Decoupled weight decay, then a bias-corrected Adam update, in place."""
    for name in registry:
        if grads.get(name) is None:
            raise ContractError(f"no gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in registry.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.shape:
            raise ContractError(f"optimizer state shape mismatch for {name!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data *= p.dtype.type(1.0 - lr * state.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * update).astype(p.dtype)


def cosine_lr(step: int, total: int, lr0: float = 5e-4, lr_min: float = 1e-7) -> float:
    if total < 1 or not 0 <= step <= total:
        raise ValueError(f"cosine_lr needs 0 <= step <= total and total >= 1 (got {step}, {total})")
    if step == total:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total))


# -------------------------------------------------------------- degradations

_BOUNDS = {
    "lowlight": {"gamma": (2.0, 4.0), "gain": (0.1, 0.4), "sigma": (0.0, 0.02)},
    "haze": {"t": (0.3, 0.8), "airlight": (0.7, 1.0)},
    "blur": {"sigma": (1.0, 3.0)},
}
KINDS = tuple(_BOUNDS)
BLUR_SIZE = 9


@dataclass
class DegradationSpec:
    """Sampling ranges for one degradation kind; defaults are the widest allowed."""

    kind: str = "lowlight"
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _BOUNDS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        bounds = _BOUNDS[self.kind]
        merged = dict(bounds)
        for key, (lo, hi) in self.ranges.items():
            if key not in bounds:
                raise ConfigError(f"{self.kind} has no parameter {key!r}")
            blo, bhi = bounds[key]
            if not blo <= lo <= hi <= bhi:
                raise ConfigError(f"{self.kind}.{key} range [{lo}, {hi}] outside [{blo}, {bhi}]")
            merged[key] = (lo, hi)
        self.ranges = merged

    def draw(self, rng: Rng) -> dict[str, float]:
        # fixed key order keeps the stream consumption reproducible
        return {k: rng.uniform(lo, hi) for k, (lo, hi) in self.ranges.items()}


def gaussian_kernel(sigma: float, size: int = BLUR_SIZE) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    r = k.size // 2
    h, w = img.shape[-2:]
    p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(r, r), (r, r)], mode="reflect" if min(h, w) > r else "edge")
    rows = sum(k[i] * p[..., i:i + h, :] for i in range(k.size))
    return sum(k[j] * rows[..., :, j:j + w] for j in range(k.size))


def apply_degradation(clean: np.ndarray, kind: str, params: dict[str, float],
                      rng: Rng | None = None) -> np.ndarray:
    """Degrade ``clean`` (values in [0, 1]) with explicit parameters; result clamped to [0, 1]."""
    x = np.asarray(clean, dtype=np.float64)
    if kind == "lowlight":
        out = params["gain"] * np.power(np.clip(x, 0.0, 1.0), params["gamma"])
        if params.get("sigma", 0.0) > 0:
            if rng is None:
                raise ContractError("low-light noise needs an rng")
            out = out + rng.normal_array(x.size, 0.0, params["sigma"]).reshape(x.shape)
    elif kind == "haze":
        t = params["t"]
        out = x * t + params["airlight"] * (1.0 - t)
    elif kind == "blur":
        out = _blur(x, params["sigma"])
    else:
        raise ConfigError(f"unknown degradation kind {kind!r}; valid kinds: {', '.join(KINDS)}")
    return np.clip(out, 0.0, 1.0)


def synth_degrade(clean: Tensor, spec: DegradationSpec, rng: Rng) -> tuple[Tensor, dict]:
    """Draw parameters from ``spec`` and degrade; returns the image and the draw."""
    params = spec.draw(rng)
    out = apply_degradation(clean.data, spec.kind, params, rng)
    return Tensor(out.astype(clean.dtype)), params


def synthetic_image(h: int, w: int, rng: Rng, dtype=np.float32) -> Tensor:
    """A smooth-plus-edges RGB test card: colour ramps, discs and a stripe texture."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    img = np.empty((3, h, w))
    for c in range(3):
        a, b, base = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.3, 0.7)
        img[c] = base + a * xx + b * yy
    for _ in range(3):
        cy, cx, rad = rng.random(), rng.random(), rng.uniform(0.1, 0.3)
        colour = [rng.uniform(0.1, 0.95) for _ in range(3)]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad * rad
        for c in range(3):
            img[c][mask] = colour[c]
    freq, phase, amp = rng.uniform(4, 12), rng.uniform(0, 2 * math.pi), rng.uniform(0.03, 0.1)
    img += amp * np.sin(2 * math.pi * freq * (xx + 0.5 * yy) + phase)
    return Tensor(np.clip(img, 0.0, 1.0)[None].astype(dtype))


# ------------------------------------------------------------------ sampling


@dataclass
class SamplePair:
    clean: Tensor
    degraded: Tensor
    provenance: dict

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise ShapeError("clean/degraded shapes differ")


def sample_patch(image: Tensor, spec: DegradationSpec, p: int, rng: Rng,
                 image_id: str | int = 0) -> SamplePair:
    """Uniform random ``p x p`` crop of ``image`` and its degraded counterpart."""
    _, _, h, w = image.shape
    if h < p or w < p:
        raise SizeError(f"image {h}x{w} smaller than patch size {p}")
    y0 = rng.randint(h - p + 1)
    x0 = rng.randint(w - p + 1)
    clean = Tensor(np.ascontiguousarray(image.data[:1, :, y0:y0 + p, x0:x0 + p]))
    degraded, draw = synth_degrade(clean, spec, rng)
    prov = {"image": image_id, "y": y0, "x": x0, "kind": spec.kind, **draw}
    return SamplePair(clean, degraded, prov)


# ---------------------------------------------------------------- train/eval


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    lr_min: float = 1e-7
    total_steps: int = 1000
    batch_size: int = 2
    patch_size: int = 64
    freq_weight: float = 0.1
    seed: int = 0
    kind: str = "lowlight"
    fixed_pairs: bool = False
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4

    def validate(self, s: int = 1) -> "TrainConfig":
        if not self.lr0 > self.lr_min > 0:
            raise ConfigError("need lr0 > lr_min > 0")
        if self.total_steps < 0 or self.batch_size < 1 or self.patch_size < 1:
            raise ConfigError("total_steps >= 0, batch_size >= 1 and patch_size >= 1 required")
        if self.patch_size % s:
            raise ConfigError(f"patch_size {self.patch_size} not divisible by shuffle factor {s}")
        if self.checkpoint_every and not self.checkpoint_path:
            raise ConfigError("checkpoint_every needs checkpoint_path")
        DegradationSpec(self.kind)
        return self


@dataclass
class TrainReport:
    losses: list[float]
    lrs: list[float]
    final_psnr: float
    baseline_psnr: float
    wall_time: float

    def log_lines(self) -> list[str]:
        return [f"{i}\t{lr:.6e}\t{loss:.6e}" for i, (lr, loss) in enumerate(zip(self.lrs, self.losses))]


def _stack(pairs: Sequence[SamplePair], dtype) -> tuple[Tensor, Tensor]:
    clean = np.concatenate([p.clean.data for p in pairs]).astype(dtype)
    deg = np.concatenate([p.degraded.data for p in pairs]).astype(dtype)
    return Tensor(deg), Tensor(clean)


def restore(model: UHDformer, degraded: Tensor) -> Tensor:
    """Forward pass without recording, clamped to [0, 1]."""
    with T.no_record():
        out = model(degraded)
    return Tensor(np.clip(out.data, 0.0, 1.0))


def evaluate(model: UHDformer, pairs: Sequence[SamplePair]) -> tuple[float, float]:
    """Mean PSNR and mean SSIM of clamped restorations against the clean images."""
    if not pairs:
        raise ContractError("evaluate needs at least one pair")
    ps, ss = [], []
    for pair in pairs:
        out = restore(model, pair.degraded)
        ps.append(psnr(out, pair.clean))
        ss.append(ssim(out.data[0], pair.clean.data[0]))
    return float(np.mean(ps)), float(np.mean(ss))


def baseline(pairs: Sequence[SamplePair]) -> tuple[float, float]:
    """Scores of the degraded inputs themselves."""
    ps = [psnr(p.degraded, p.clean) for p in pairs]
    ss = [ssim(p.degraded.data[0], p.clean.data[0]) for p in pairs]
    return float(np.mean(ps)), float(np.mean(ss))


def make_pairs(data: Sequence[Tensor], spec: DegradationSpec, p: int, seed: int,
               label: str) -> list[SamplePair]:
    """One deterministic pair per image, each from its own substream."""
    return [sample_patch(img, spec, p, substream(seed, f"{label}:{i}"), i) for i, img in enumerate(data)]


def train(model: UHDformer, data: Sequence[Tensor], tcfg: TrainConfig,
          log: Callable[[str], None] | None = None) -> TrainReport:
    """Optimise ``model`` on synthetic pairs cut from ``data``.

    With ``fixed_pairs`` one pair per image is drawn up front and cycled in
    order; otherwise every step draws fresh crops and degradations from the
    substream ``(seed, "step:<i>")``. The reported PSNRs are measured on the
    fixed pairs, or on one ``"eval"`` pair per image.
    """
    if not data:
        raise ContractError("train needs at least one image")
    tcfg.validate(model.cfg.s)
    spec = DegradationSpec(tcfg.kind)
    dtype = model.cfg.np_dtype
    p = tcfg.patch_size
    fixed = make_pairs(data, spec, p, tcfg.seed, "pairs") if tcfg.fixed_pairs else None
    eval_pairs = fixed if fixed is not None else make_pairs(data, spec, p, tcfg.seed, "eval")
    state = AdamWState.for_registry(model.registry, beta1=tcfg.beta1, beta2=tcfg.beta2,
                                    eps=tcfg.eps, weight_decay=tcfg.weight_decay)
    losses, lrs = [], []
    start = time.perf_counter()
    for step in range(tcfg.total_steps):
        if fixed is not None:
            batch = [fixed[(step * tcfg.batch_size + b) % len(fixed)] for b in range(tcfg.batch_size)]
        else:
            rng = substream(tcfg.seed, f"step:{step}")
            batch = []
            for _ in range(tcfg.batch_size):
                i = rng.randint(len(data))
                batch.append(sample_patch(data[i], spec, p, rng, i))
        inp, target = _stack(batch, dtype)
        # the last step runs at lr_min, so the logged schedule shows both endpoints
        lr = cosine_lr(step, max(tcfg.total_steps - 1, 1), tcfg.lr0, tcfg.lr_min)
        with T.Tape() as tape:
            loss = restoration_loss(model(inp), target, tcfg.freq_weight)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at step {step} (lr={lr:.3e}, loss={value})")
        tape.backward(loss)
        grads = {name: tape.grad(prm) for name, prm in model.registry.items()}
        adamw_step(model.registry, grads, state, lr)
        losses.append(value)
        lrs.append(lr)
        if log is not None:
            log(f"{step}\t{lr:.6e}\t{value:.6e}")
        if tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(model, tcfg.checkpoint_path, state)
    wall = time.perf_counter() - start
    final, _ = evaluate(model, eval_pairs)
    base, _ = baseline(eval_pairs)
    return TrainReport(losses, lrs, final, base, wall)
