"""Command-line entry point: ``uhdformer <command> ...``.

Commands: synth, train, infer, eval, selftest, params. Exit codes are 0 on
success, 1 for usage or configuration errors, 2 for file, format or
checkpoint problems and 3 for numerical failures (including a failed
self-test).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import selftest
from .config import load_config
from .errors import (CompatibilityError, ConfigError, FormatError, NumericalError, ShapeError,
                     SizeError, UHDFError)
from .imageio import buffer_to_tensor, read_image, tensor_to_buffer, write_atomic, write_image
from .metrics import psnr, ssim
from .model import ABLATIONS, UHDformerConfig, build_model, model_from_checkpoint, param_count, save_checkpoint
from .rng import substream
from .tensor import Tensor
from .training import KINDS, DegradationSpec, restore, synth_degrade, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------------ helpers


def read_manifest(path) -> list[tuple[Path, Path, dict]]:
    """``(clean, degraded, draw)`` rows; paths are relative to the manifest."""
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            draw = json.loads(parts[2])
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: bad draw record: {exc}") from None
        rows.append((path.parent / parts[0], path.parent / parts[1], draw))
    return rows


def pad_to_multiple(x: np.ndarray, s: int) -> np.ndarray:
    """Reflect-pad the bottom and right of ``(n, c, h, w)`` up to multiples of ``s``."""
    h, w = x.shape[2:]
    ph, pw = -h % s, -w % s
    if not (ph or pw):
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")


def restore_any_size(model, img: Tensor) -> Tensor:
    """Restore an image of any extent: pad to the shuffle factor, run, crop back."""
    h, w = img.shape[2:]
    padded = Tensor(pad_to_multiple(img.data, model.cfg.s))
    return Tensor(np.ascontiguousarray(restore(model, padded).data[:, :, :h, :w]))


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be positive")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    src, out = Path(args.inp), Path(args.out)
    if not src.is_dir():
        raise UsageError(f"input directory {src} does not exist")
    images = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise UsageError(f"no .png/.ppm images in {src}")
    out.mkdir(parents=True, exist_ok=True)
    spec = DegradationSpec(args.kind)
    lines = []
    for i, path in enumerate(images):
        clean = buffer_to_tensor(read_image(path))
        degraded, draw = synth_degrade(clean, spec, substream(_seed(args), f"synth:{i}"))
        clean_name, deg_name = f"{path.stem}_clean.png", f"{path.stem}_{args.kind}.png"
        write_image(out / clean_name, tensor_to_buffer(clean))
        write_image(out / deg_name, tensor_to_buffer(degraded))
        record = json.dumps({"kind": args.kind, **draw}, sort_keys=True)
        lines.append(f"{clean_name}\t{deg_name}\t{record}\n")
    write_atomic(out / "manifest.tsv", "".join(lines).encode("utf-8"))
    _say(f"wrote {len(lines)} pairs and {out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.manifest:
        overrides.append(f"data.manifest={args.manifest}")
    if args.out:
        overrides.append(f"data.checkpoint={args.out}")
    if args.log:
        overrides.append(f"data.log={args.log}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is required for training")

    header = [f"# {line}" for line in cfg.lines()]
    for line in header:
        _say(line)
    rows = read_manifest(cfg.data.manifest)
    if not rows:
        raise UsageError(f"manifest {cfg.data.manifest} lists no pairs")
    images = [buffer_to_tensor(read_image(clean)) for clean, _, _ in rows]

    log_lines = list(header)

    def log(line: str) -> None:
        log_lines.append(line)
        _say(line)

    def flush_log() -> None:
        if cfg.data.log:
            write_atomic(cfg.data.log, ("\n".join(log_lines) + "\n").encode("utf-8"))

    model = build_model(cfg.model, substream(cfg.train.seed, "model"))
    log("# step\tlr\tloss")
    try:
        report = train(model, images, cfg.train, log)
    except NumericalError as exc:
        log(f"# aborted: {exc}")
        flush_log()
        raise
    save_checkpoint(model, cfg.data.checkpoint)
    lr_range = f"{report.lrs[0]:.3e} -> {report.lrs[-1]:.3e}" if report.lrs else "none"
    log(f"# done: {cfg.train.total_steps} steps in {report.wall_time:.1f}s, lr {lr_range}, "
        f"psnr {report.baseline_psnr:.3f} -> {report.final_psnr:.3f} dB")
    log(f"# checkpoint: {cfg.data.checkpoint}")
    flush_log()
    return EXIT_OK


def cmd_infer(args) -> int:
    model = model_from_checkpoint(args.ckpt)
    img = buffer_to_tensor(read_image(args.inp))
    start = time.perf_counter()
    out = restore_any_size(model, img)
    wall = time.perf_counter() - start
    write_image(args.out, tensor_to_buffer(out))
    print(f"{args.inp}\t{img.shape[3]}x{img.shape[2]}\t{wall:.3f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    rows = read_manifest(args.manifest)
    if not rows:
        raise UsageError(f"manifest {args.manifest} lists no pairs")
    model = model_from_checkpoint(args.ckpt)
    scores = []
    for i, (clean_path, deg_path, _) in enumerate(rows):
        clean = buffer_to_tensor(read_image(clean_path))
        degraded = buffer_to_tensor(read_image(deg_path))
        if clean.shape != degraded.shape:
            raise ShapeError(f"pair {i}: {clean_path.name} and {deg_path.name} differ in size")
        # score what a user would get back: the 8-bit restored image
        out = buffer_to_tensor(tensor_to_buffer(restore_any_size(model, degraded)))
        scores.append((str(i), psnr(out, clean), ssim(out.data[0], clean.data[0])))
    scores.append(("mean", float(np.mean([s[1] for s in scores])), float(np.mean([s[2] for s in scores]))))

    width = max(len("pair"), *(len(s[0]) for s in scores))
    print(f"{'pair':<{width}}  {'PSNR':>9}  {'SSIM':>7}")
    for pid, p, s in scores:
        print(f"{pid:<{width}}  {p:9.4f}  {s:7.5f}")
    record = Path(args.record) if args.record else Path(args.manifest).with_suffix(".eval.tsv")
    body = "pair\tpsnr\tssim\n" + "".join(f"{pid}\t{p!r}\t{s!r}\n" for pid, p, s in scores)
    write_atomic(record, body.encode("utf-8"))
    _say(f"record written to {record}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    results = selftest.run(args.level, seed=_seed(args), fault=args.inject_fault)
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_params(args) -> int:
    cfg = load_config(args.config, args.set or [])
    total, breakdown = param_count(build_model(cfg.model, 0))
    print(f"{'part':<8}{'params':>10}")
    for part, n in breakdown.items():
        print(f"{part:<8}{n:>10,}")
    print(f"{'total':<8}{total:>10,}")
    print()
    print("ablation variants:")
    base = cfg.model.to_dict()
    for label, change in ABLATIONS.items():
        n = param_count(build_model(UHDformerConfig(**{**base, **change}), 0))[0]
        print(f"  {label:<32}{n:>10,}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw")
    common.add_argument("--threads", type=int, default=None,
                        help="bound on BLAS/OpenMP threads (default: all cores)")

    parser = _Parser(prog="uhdformer", description="Two-space image restoration network.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="make degraded/clean pairs and a manifest")
    p.add_argument("--in", dest="inp", required=True, help="directory of clean .png/.ppm images")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kind", required=True, choices=KINDS)
    p.set_defaults(func=cmd_synth)

    def config_args(p):
        p.add_argument("--config", help="INI file with [model], [train] and [data] sections")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    p = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    config_args(p)
    p.add_argument("--manifest", help="shorthand for --set data.manifest=PATH")
    p.add_argument("--out", help="shorthand for --set data.checkpoint=PATH")
    p.add_argument("--log", help="shorthand for --set data.log=PATH")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="restore one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--record", help="TSV output (default: <manifest>.eval.tsv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", parents=[common], help="run the invariant checks")
    p.add_argument("--level", choices=selftest.LEVELS, default="quick")
    p.add_argument("--inject-fault", choices=selftest.FAULTS, default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("params", parents=[common], help="parameter counts")
    config_args(p)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit(args.threads):
            return args.func(args)
    except (UsageError, ConfigError, SizeError) as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE
    except (OSError, FormatError, CompatibilityError, ShapeError) as exc:
        _say(f"error: {exc}")
        return EXIT_IO
    except NumericalError as exc:
        _say(f"error: {exc}")
        return EXIT_NUMERIC
    except UHDFError as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
