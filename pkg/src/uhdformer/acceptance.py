"""Exit-criterion checks, shared by the pytest acceptance suite and ``selftest``.

Each check returns a :class:`CheckResult`; nothing here raises on failure.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blocks as B
from . import tensor as T
from .metrics import PSNR_CAP, psnr, ssim
from .model import UHDformerConfig, build_model, load_checkpoint, param_count, save_checkpoint
from .rng import Rng, substream
from .tensor import Tensor
from .training import (DegradationSpec, TrainConfig, baseline, evaluate, make_pairs,
                       synthetic_image, train)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# ------------------------------------------------------------ selection oracle


def brute_force_selection(r1: np.ndarray, r2: np.ndarray, r: int) -> list[list[int]]:
    """Reference top-k channel choice with plain Python loops, one list per sample."""
    n, c = r1.shape[:2]
    out = []
    for b in range(n):
        a = [[float(v) for v in r1[b, i].ravel()] for i in range(c)]
        q = [[float(v) for v in r2[b, j].ravel()] for j in range(c)]
        na = [math.sqrt(sum(v * v for v in row)) for row in a]
        nq = [math.sqrt(sum(v * v for v in row)) for row in q]
        best = []
        for i in range(c):
            sims = []
            for j in range(c):
                den = na[i] * nq[j]
                dot = sum(x * y for x, y in zip(a[i], q[j]))
                sims.append(dot / den if den > 1e-12 else 0.0)
            best.append(max(sims))
        ranked = sorted(range(c), key=lambda i: (-best[i], i))
        out.append(ranked[: c // r])
    return out


def random_selection_case(rng: Rng):
    c = (4, 8)[rng.randint(2)]
    r = (1, 2, 4)[rng.randint(3)]
    h, w = 1 + rng.randint(4), 1 + rng.randint(4)
    r1 = rng.normal_array(c * h * w).reshape(1, c, h, w)
    r2 = rng.normal_array(c * h * w).reshape(1, c, h, w)
    if rng.randint(4) == 0:
        # duplicated channels force exact ties in the ranking
        src, dst = rng.randint(c), rng.randint(c)
        r1[0, dst] = r1[0, src]
    return r1, r2, r


def check_selection_oracle(count: int = 200, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    matched = 0
    for i in range(count):
        r1, r2, r = random_selection_case(substream(seed, f"select:{i}"))
        got = B.cmt_select(Tensor(r1), Tensor(r2), r).indices.tolist()
        if got == brute_force_selection(r1, r2, r):
            matched += 1
    dt = time.perf_counter() - start
    ok = matched == count and dt < 5.0
    return CheckResult("DualCMT-oracle", ok, f"pass count {matched}/{count}, {dt:.2f}s (limit 5s)")


# -------------------------------------------------------------- gradient suite


def _rand(shape, rng: Rng) -> Tensor:
    return T.normal(shape, rng)


# Central-difference step. The reference is evaluated in long double, where
# round-off and truncation balance near 1e-6 for unit-scale functions; the
# scalars here reach about 20, so the step sits a little higher.
GRAD_EPS = 3e-6


def _projection(weights: Tensor):
    return lambda y: T.sum_all(T.mul(y, weights))


def _mean_square(y: Tensor) -> Tensor:
    return T.mean_all(T.mul(y, y))


def block_grad_error(forward, inputs: list[Tensor], params: list[Tensor], rng: Rng,
                     max_coords: int | None = None, eps: float = GRAD_EPS,
                     reduce: str = "projection", carry: list[Tensor] = ()) -> float:
    """Worst grad_check error over ``inputs`` and ``params`` of ``forward(*inputs)``.

    The scalar is either a fixed random projection of the output or its mean
    square. Every discrete choice (top-k channels, max-pool positions) is
    frozen on the first evaluation, and the finite-difference reference runs
    in extended precision.
    """
    with B.frozen_selection() as sel:
        with T.no_record():
            probe = forward(*inputs)
        weights = T.normal(probe.shape, rng)
        head = _projection(weights) if reduce == "projection" else _mean_square
        f = sel.wrap(lambda _: head(forward(*inputs)))
        every = [*inputs, *params, *carry, weights]
        worst = 0.0
        for t in list(inputs) + list(params):
            coords = None
            if max_coords is not None and t.size > max_coords:
                coords = sorted({rng.randint(t.size) for _ in range(max_coords)})
            worst = max(worst, T.grad_check(f, t, eps, coords, fd_dtype=np.longdouble, carry=every))
    return worst


@dataclass
class GradCase:
    name: str
    forward: object
    inputs: list
    params: list
    tol: float
    max_coords: int | None = None
    reduce: str = "projection"
    carry: list = ()


def gradient_cases(seed: int = 0) -> list[GradCase]:
    f64 = np.float64
    rng = substream(seed, "grad-params")
    data = substream(seed, "grad-data")
    cases = []

    blk = B.ConvNeXtBlock(4, rng, f64)
    cases.append(GradCase("ConvNeXt", blk, [_rand((1, 4, 6, 6), data)], blk.parameters(),
                          1e-5))

    acm = B.ACMBlock(4, rng, f64)
    xs = [_rand((1, 4, 4, 4), data) for _ in range(3)]
    cases.append(GradCase("ACM", acm, xs, acm.parameters(), 1e-5))

    gfr = B.GFRBlock(8, 8, rng, f64)  # C=8, r=2, both branches: 2C/r = 8
    cases.append(GradCase("GFR", gfr, [_rand((1, 8, 4, 4), data)], gfr.parameters(),
                          1e-5))

    d = B.DualCMTBlock(4, 2, 2, rng, dtype=f64)
    cases.append(GradCase("DualCMT", d, [_rand((1, 12, 8, 8), data), _rand((1, 4, 4, 4), data)],
                          d.parameters(), 1e-5))

    a = B.CMTABlock(4, 2, 2, 2, rng, dtype=f64)
    cases.append(GradCase("CMTA", a, [_rand((1, 4, 4, 4), data), _rand((1, 12, 8, 8), data)],
                          a.parameters(), 1e-5))

    nb = B.CMTNBlock(4, 2, 2, rng, dtype=f64)
    cases.append(GradCase("CMTN", nb, [_rand((1, 4, 4, 4), data), _rand((1, 12, 8, 8), data)],
                          nb.parameters(), 1e-5))

    tb = B.CMTTBBlock(4, 2, 2, 2, rng, dtype=f64)
    cases.append(GradCase("CMT-TB", tb, [_rand((1, 4, 4, 4), data), _rand((1, 12, 8, 8), data)],
                          tb.parameters(), 1e-5))

    cfg = UHDformerConfig(C=4, L=3, heads=2, r=2, s=2, dtype="f64")
    model = build_model(cfg, substream(seed, "grad-model"))
    img = T.uniform((1, 3, 16, 16), data)
    # roughly 1% of the parameters, spread over every tensor
    budget = max(1, param_count(model)[0] // 100)
    per_tensor = max(1, budget // len(model.registry))
    cases.append(GradCase("full-model slice", lambda: model(img), [], list(model.registry.values()),
                          1e-4, per_tensor, "mean_square", [img]))
    return cases


def check_gradients(seed: int = 0, names: set[str] | None = None) -> list[CheckResult]:
    results = []
    rng = substream(seed, "grad-weights")
    for case in gradient_cases(seed):
        if names is not None and case.name not in names:
            continue
        start = time.perf_counter()
        err = block_grad_error(case.forward, case.inputs, case.params, rng, case.max_coords,
                               reduce=case.reduce, carry=case.carry)
        dt = time.perf_counter() - start
        results.append(CheckResult(f"gradient {case.name}", err < case.tol,
                                   f"max rel err {err:.2e} (tol {case.tol:.0e}), {dt:.1f}s"))
    return results


# --------------------------------------------------------- residual identities


def check_residual_identities(trials: int = 50, seed: int = 0) -> list[CheckResult]:
    model = build_model(UHDformerConfig(), substream(seed, "ident-model"))
    model.tail_conv.zero_()
    data = substream(seed, "ident-data")
    exact = 0
    for _ in range(trials):
        h, w = 8 * (1 + data.randint(3)), 8 * (1 + data.randint(3))
        x = T.uniform((1, 3, h, w), data, dtype=np.float32)
        if np.array_equal(model(x).data, x.data):
            exact += 1
    res = [CheckResult("zero-tail model identity", exact == trials, f"{exact}/{trials} bit-exact")]

    blk = B.CMTTBBlock(16, 8, 4, 8, substream(seed, "ident-block"))
    for conv in blk.final_projections():
        conv.zero_()
    exact = 0
    for _ in range(trials):
        x = T.normal((1, 16, 2, 2), data, dtype=np.float32)
        x_acm = T.normal((1, 48, 16, 16), data, dtype=np.float32)
        if np.array_equal(blk(x, x_acm).data, x.data):
            exact += 1
    res.append(CheckResult("zero-projection CMT-TB identity", exact == trials, f"{exact}/{trials} bit-exact"))
    return res


# ------------------------------------------------------- structural invariants


def check_structural(seed: int = 0) -> list[CheckResult]:
    rng = substream(seed, "struct")
    res = []

    bad = []
    for s in (2, 4, 8):
        for _ in range(5):
            x = T.normal((1 + rng.randint(2), 1 + rng.randint(3), s * (1 + rng.randint(3)),
                          s * (1 + rng.randint(3))), rng)
            if not np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(x, s), s).data, x.data):
                bad.append(s)
    res.append(CheckResult("shuffle round trip", not bad, "bit-exact for s in {2,4,8}" if not bad
                           else f"mismatch for s={bad}"))

    worst = 0.0
    for magnitude in (1.0, 100.0, 1e4):
        x = T.uniform((2, 7, 3, 3), rng, -magnitude, magnitude, dtype=np.float32)
        sums = T.softmax(x, "channel").data.astype(np.float64).sum(axis=1)
        worst = max(worst, float(np.abs(sums - 1.0).max()))
    res.append(CheckResult("channel softmax sums", worst <= 1e-6, f"max |sum-1| = {worst:.1e}"))

    x = T.normal((1, 1, 4, 4), rng)
    spec = T.dft2(x)
    lhs = float((x.data ** 2).sum())
    rhs = float((spec.re.data ** 2 + spec.im.data ** 2).sum()) / 16.0
    res.append(CheckResult("Parseval for dft2", abs(lhs - rhs) <= 1e-5, f"|diff| = {abs(lhs - rhs):.1e}"))

    model = build_model(UHDformerConfig(C=8, L=3), substream(seed, "ckpt-model"))
    img = T.uniform((1, 3, 16, 16), rng, dtype=np.float32)
    before = model(img).data.copy()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(model, path)
        fresh = build_model(UHDformerConfig(C=8, L=3), substream(seed, "other-init"))
        load_checkpoint(fresh, path)
    same_params = all(np.array_equal(p.data, fresh.registry[k].data) for k, p in model.registry.items())
    same_out = np.array_equal(fresh(img).data, before)
    res.append(CheckResult("checkpoint round trip", same_params and same_out,
                           f"parameters equal={same_params}, outputs equal={same_out}"))
    return res


# --------------------------------------------------------------- param budget


def check_param_budget(limit: int = 500_000) -> CheckResult:
    total, breakdown = param_count(build_model(UHDformerConfig(), 0))
    rows = ", ".join(f"{k}={v}" for k, v in breakdown.items())
    ok = total <= limit and sum(breakdown.values()) == total
    return CheckResult("parameter budget", ok, f"total {total} (limit {limit}): {rows}")


# ------------------------------------------------------------- training runs


def overfit_setup(seed: int, images: int):
    return [synthetic_image(64, 64, substream(seed, f"image:{i}")) for i in range(images)]


def overfit_run(seed: int = 0, steps: int = 500, **model_overrides):
    cfg = UHDformerConfig(C=8, L=6, **model_overrides)
    model = build_model(cfg, substream(seed, "overfit-model"))
    tcfg = TrainConfig(total_steps=steps, batch_size=2, patch_size=64, seed=seed,
                       kind="lowlight", fixed_pairs=True)
    report = train(model, overfit_setup(seed, 4), tcfg)
    return model, report


def check_overfit(seed: int = 0, steps: int = 500) -> CheckResult:
    start = time.perf_counter()
    m1, rep = overfit_run(seed, steps)
    m2, _ = overfit_run(seed, steps)
    wall = time.perf_counter() - start
    same = all(np.array_equal(p.data, m2.registry[k].data) for k, p in m1.registry.items())
    gain = rep.final_psnr - rep.baseline_psnr
    ok = gain >= 6.0 and rep.wall_time < 900 and same and all(map(math.isfinite, rep.losses))
    return CheckResult("overfit run", ok,
                       f"PSNR {rep.baseline_psnr:.2f} -> {rep.final_psnr:.2f} dB (gain {gain:+.2f}, need +6), "
                       f"run {rep.wall_time:.0f}s (limit 900s), two runs bit-identical={same}, "
                       f"total {wall:.0f}s")


def check_ablation_direction(seed: int = 0, steps: int = 2000) -> CheckResult:
    held_img = [synthetic_image(64, 64, substream(seed, "image:held-out"))]
    held = make_pairs(held_img, DegradationSpec("lowlight"), 64, seed, "held-out")
    scores = {}
    for name, kw in (("full", {}), ("dualcmt-off", dict(dualcmt_in_attn=False, dualcmt_in_ffn=False))):
        model, _ = overfit_run(seed, steps, **kw)
        scores[name] = evaluate(model, held)[0]
    base = baseline(held)[0]
    ok = scores["full"] >= scores["dualcmt-off"]
    return CheckResult("ablation direction", ok,
                       f"held-out PSNR full {scores['full']:.3f} dB vs dualcmt-off "
                       f"{scores['dualcmt-off']:.3f} dB (degraded input {base:.3f} dB)")


# ------------------------------------------------------------------- metrics


def check_metrics(seed: int = 0) -> list[CheckResult]:
    rng = substream(seed, "metrics")
    a = T.uniform((1, 3, 16, 16), rng, 0.0, 1.0 - 1 / 255)
    b = Tensor(a.data + 1 / 255)
    p = psnr(a, b)
    target = 20 * math.log10(255)
    res = [CheckResult("PSNR uniform error", abs(p - target) <= 1e-3, f"{p:.4f} dB vs {target:.4f} dB")]

    s = ssim(a.data[0], a.data[0])
    res.append(CheckResult("SSIM self-similarity", abs(s - 1.0) <= 1e-6, f"ssim(a,a) = {s:.9f}"))

    clean = T.uniform((1, 3, 16, 16), rng)
    noise = T.normal((1, 3, 16, 16), rng)
    values = [psnr(clean, Tensor(clean.data + sc * noise.data)) for sc in (1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.3)]
    decreasing = all(x > y for x, y in zip(values, values[1:])) and values[0] < PSNR_CAP
    res.append(CheckResult("PSNR decreasing in MSE", decreasing,
                           "ladder " + " > ".join(f"{v:.2f}" for v in values)))
    return res


def run_all(seed: int = 0, include_training: bool = True) -> list[CheckResult]:
    results = [check_selection_oracle(seed=seed)]
    results += check_gradients(seed)
    results += check_residual_identities(seed=seed)
    results += check_structural(seed)
    results.append(check_param_budget())
    if include_training:
        results.append(check_overfit(seed))
        results.append(check_ablation_direction(seed))
    results += check_metrics(seed)
    return results
