"""Full two-space network, parameter registry and checkpoint files."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import ACMBlock, Block, CMTTBBlock, Conv, ConvNeXtBlock, pointwise
from .imageio import write_atomic
from .errors import CompatibilityError, ConfigError, FormatError, ShapeError
from .rng import Rng
from .tensor import Tensor

MAGIC = b"UHDFKPT1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

# breakdown bucket for every top-level attribute of UHDformer
_GROUPS = {
    "head_conv": "head",
    "enc": "enc",
    "acm": "acm",
    "down_proj": "bridge",
    "up_proj": "bridge",
    "body": "body",
    "fuse_conv": "fusion",
    "fuse_blocks": "fusion",
    "tail_conv": "tail",
}


@dataclass
class UHDformerConfig:
    C: int = 16
    L: int = 15
    heads: int = 8
    r: int = 4
    s: int = 8
    group: int = 3
    dualcmt_in_attn: bool = True
    dualcmt_in_ffn: bool = True
    use_max_branch: bool = True
    use_mean_branch: bool = True
    dtype: str = "f32"

    def validate(self) -> "UHDformerConfig":
        for name in ("C", "L", "heads", "r", "s", "group"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive")
        if self.C % self.heads:
            raise ConfigError(f"heads={self.heads} must divide C={self.C}")
        if self.C % self.r:
            raise ConfigError(f"r={self.r} must divide C={self.C}")
        if self.L % self.group:
            raise ConfigError(f"group={self.group} must divide L={self.L}")
        if self.s & (self.s - 1):
            raise ConfigError(f"s={self.s} must be a power of two")
        uses_dualcmt = self.dualcmt_in_attn or self.dualcmt_in_ffn
        if uses_dualcmt and not (self.use_max_branch or self.use_mean_branch):
            raise ConfigError("at least one pooling branch is needed while DualCMT is enabled")
        if self.dtype not in T.DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(T.DTYPES)}")
        return self

    @property
    def np_dtype(self):
        return T.DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UHDformerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


# ablation rows (a)-(e) as config overrides
ABLATIONS = {
    "(a) no DualCMT": dict(dualcmt_in_attn=False, dualcmt_in_ffn=False),
    "(b) no DualCMT in attention": dict(dualcmt_in_attn=False),
    "(c) no DualCMT in forward net": dict(dualcmt_in_ffn=False),
    "(d) no max-pool branch": dict(use_max_branch=False),
    "(e) no mean-pool branch": dict(use_mean_branch=False),
    "full model": {},
}


class UHDformer(Block):
    def __init__(self, cfg: UHDformerConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        c, s, dt = cfg.C, cfg.s, cfg.np_dtype
        self.head_conv = Conv(3, c, 3, rng, dtype=dt)
        self.enc = [ConvNeXtBlock(c, rng, dt) for _ in range(3)]
        self.acm = ACMBlock(c, rng, dt)
        self.down_proj = pointwise(c * s * s, c, rng, dt)
        self.body = [
            CMTTBBlock(c, cfg.heads, cfg.r, s, rng, cfg.dualcmt_in_attn, cfg.dualcmt_in_ffn,
                       cfg.use_max_branch, cfg.use_mean_branch, dt)
            for _ in range(cfg.L)
        ]
        self.up_proj = pointwise(c, c * s * s, rng, dt)
        self.fuse_conv = pointwise(2 * c, c, rng, dt)
        self.fuse_blocks = [ConvNeXtBlock(c, rng, dt) for _ in range(2)]
        self.tail_conv = Conv(c, 3, 3, rng, dtype=dt)
        self.registry: dict[str, Tensor] = dict(self.named_parameters())
        for name, p in self.registry.items():
            p.name = name

    def body_low(self, x_low: Tensor, x_acm: Tensor) -> Tensor:
        g = self.cfg.group
        y = x_low
        for start in range(0, len(self.body), g):
            y_in = y
            for blk in self.body[start:start + g]:
                y = blk(y, x_acm)
            y = y + y_in
        return y

    def __call__(self, img: Tensor) -> Tensor:
        n, ch, H, W = img.shape
        s = self.cfg.s
        if ch != 3:
            raise ShapeError(f"expected RGB input, got {ch} channels")
        if H % s or W % s:
            raise ShapeError(f"input {H}x{W} not divisible by {s}")
        if img.dtype != self.cfg.np_dtype:
            img = img.astype(self.cfg.np_dtype)
        x0 = self.head_conv(img)
        x1 = self.enc[0](x0)
        x2 = self.enc[1](x1)
        x3 = self.enc[2](x2)
        x_acm = self.acm(x1, x2, x3)
        x_low = self.down_proj(T.pixel_unshuffle(x0, s))
        x_low = self.body_low(x_low, x_acm)
        up = T.pixel_shuffle(self.up_proj(x_low), s)
        feat = self.fuse_conv(T.concat_channels([x3, up]))
        for blk in self.fuse_blocks:
            feat = blk(feat)
        return img + self.tail_conv(feat)


def build_model(cfg: UHDformerConfig | None = None, rng: Rng | int = 0) -> UHDformer:
    """Build and initialise a model; ``rng`` may be a seed."""
    if cfg is None:
        cfg = UHDformerConfig()
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    return UHDformer(cfg, rng)


def param_count(model: Block) -> tuple[int, dict[str, int]]:
    """Total trainable scalars and a per-part breakdown.

    Parameters outside the UHDformer layout (e.g. a bare block) count under "other".
    """
    breakdown = {k: 0 for k in ("head", "enc", "acm", "bridge", "body", "fusion", "tail")}
    total = 0
    for name, p in model.named_parameters():
        part = _GROUPS.get(name.split(".", 1)[0], "other")
        breakdown[part] = breakdown.get(part, 0) + p.size
        total += p.size
    return total, breakdown


# ----------------------------------------------------------------- checkpoint
#
# Layout (all integers little-endian):
#   8   magic "UHDFKPT1"
#   u32 config JSON length, then UTF-8 JSON of the model config
#   u32 entry count
#   per entry: u16 name length, UTF-8 name, u8 dtype code (0 = f32),
#              4 x u64 extents, raw little-endian payload
# Optimizer state uses names "opt.step", "opt.m.<param>", "opt.v.<param>".


def _entry_bytes(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<B", 0)
            + struct.pack("<4Q", *arr.shape) + payload)


def save_checkpoint(model: UHDformer, path, opt_state=None) -> None:
    """Write parameters (and optionally AdamW state) as little-endian f32."""
    cfg_raw = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    entries = [(name, p.data) for name, p in model.registry.items()]
    if opt_state is not None:
        entries.append(("opt.step", np.full((1, 1, 1, 1), opt_state.step)))
        entries += [(f"opt.m.{k}", v) for k, v in opt_state.m.items()]
        entries += [(f"opt.v.{k}", v) for k, v in opt_state.v.items()]
    blob = [MAGIC, struct.pack("<I", len(cfg_raw)), cfg_raw, struct.pack("<I", len(entries))]
    blob += [_entry_bytes(n, a) for n, a in entries]
    write_atomic(path, b"".join(blob))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into ``(config dict, {name: array})`` without touching any model."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated checkpoint: need {n} bytes", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    try:
        cfg = json.loads(take(cfg_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad config record: {exc}", 12) from None
    (count,) = struct.unpack("<I", take(4))
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8", errors="strict")
        (code,) = struct.unpack("<B", take(1))
        if code not in DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} for {name!r}", start)
        shape = struct.unpack("<4Q", take(32))
        dt = DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.uint64)) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(shape)
        if name in entries:
            raise FormatError(f"duplicate entry {name!r}", start)
        entries[name] = arr
    if pos != len(data):
        raise FormatError("trailing bytes after last entry", pos)
    return cfg, entries


def load_checkpoint(model: UHDformer, path, opt_state=None) -> None:
    """Overwrite ``model`` parameters in place; nothing changes if any check fails."""
    _, entries = read_checkpoint(path)
    params = {k: v for k, v in entries.items() if not k.startswith("opt.")}
    for name, p in model.registry.items():
        if name not in params:
            raise CompatibilityError(f"checkpoint lacks parameter {name!r}")
        if params[name].shape != p.shape:
            raise CompatibilityError(
                f"shape mismatch for {name!r}: checkpoint {params[name].shape}, model {p.shape}")
    extra = sorted(set(params) - set(model.registry))
    if extra:
        raise CompatibilityError(f"checkpoint has unknown parameter {extra[0]!r}")
    if opt_state is not None:
        if "opt.step" not in entries:
            raise CompatibilityError("checkpoint has no optimizer state")
        for name in model.registry:
            if f"opt.m.{name}" not in entries or f"opt.v.{name}" not in entries:
                raise CompatibilityError(f"optimizer state lacks {name!r}")
    for name, p in model.registry.items():
        p.data[...] = params[name]
    if opt_state is not None:
        opt_state.step = int(entries["opt.step"].reshape(-1)[0])
        for name, p in model.registry.items():
            opt_state.m[name] = entries[f"opt.m.{name}"].astype(p.dtype)
            opt_state.v[name] = entries[f"opt.v.{name}"].astype(p.dtype)


def model_from_checkpoint(path, rng: Rng | int = 0) -> UHDformer:
    cfg_dict, _ = read_checkpoint(path)
    model = build_model(UHDformerConfig.from_dict(cfg_dict), rng)
    load_checkpoint(model, path)
    return model
