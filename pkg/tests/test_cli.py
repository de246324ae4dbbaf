import shutil
import subprocess
import sys

import numpy as np
import pytest

from uhdformer.cli import main, pad_to_multiple, read_manifest
from uhdformer.config import load_config
from uhdformer.errors import ConfigError, FormatError
from uhdformer.imageio import ImageBuffer, read_image, write_image
from uhdformer.model import UHDformerConfig, build_model, read_checkpoint, save_checkpoint
from uhdformer.rng import Rng

SMALL_SETS = ["model.C=4", "model.L=3", "model.heads=2", "model.r=2", "model.s=2",
              "train.patch_size=16", "train.batch_size=1"]


def buffer(h, w, seed):
    px = (Rng(seed).random_array(h * w * 3) * 256).astype(np.uint8).reshape(h, w, 3)
    return ImageBuffer(w, h, px)


@pytest.fixture
def clean_dir(tmp_path):
    d = tmp_path / "clean"
    d.mkdir()
    for i in range(3):
        write_image(d / f"img{i}.png", buffer(24, 24, i))
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def synth(capsys, src, out, kind="haze", seed=5):
    return run(capsys, "synth", "--in", src, "--out", out, "--kind", kind, "--seed", seed)


def sets(*extra):
    return [x for item in (*SMALL_SETS, *extra) for x in ("--set", item)]


def zero_tail_checkpoint(path, **cfg):
    m = build_model(UHDformerConfig(**cfg), 0)
    m.tail_conv.zero_()
    save_checkpoint(m, path)
    return path


# --------------------------------------------------------------------- synth


def test_synth_writes_pairs_and_manifest(capsys, clean_dir, tmp_path):
    code, _, err = synth(capsys, clean_dir, tmp_path / "a")
    assert code == 0 and "3 pairs" in err
    rows = read_manifest(tmp_path / "a" / "manifest.tsv")
    assert len(rows) == 3
    for clean, degraded, draw in rows:
        assert clean.exists() and degraded.exists()
        assert draw["kind"] == "haze" and 0.3 <= draw["t"] <= 0.8
    assert np.array_equal(read_image(rows[0][0]).pixels, read_image(clean_dir / "img0.png").pixels)


def test_synth_is_byte_identical_across_runs(capsys, clean_dir, tmp_path):
    synth(capsys, clean_dir, tmp_path / "a", "lowlight")
    synth(capsys, clean_dir, tmp_path / "b", "lowlight")
    a = sorted((tmp_path / "a").iterdir())
    b = sorted((tmp_path / "b").iterdir())
    assert [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    synth(capsys, clean_dir, tmp_path / "c", "lowlight", seed=6)
    assert (tmp_path / "c" / "img0_lowlight.png").read_bytes() != (tmp_path / "a" / "img0_lowlight.png").read_bytes()


def test_synth_does_not_touch_inputs(capsys, clean_dir, tmp_path):
    before = {p.name: p.read_bytes() for p in clean_dir.iterdir()}
    synth(capsys, clean_dir, tmp_path / "a", "blur")
    assert {p.name: p.read_bytes() for p in clean_dir.iterdir()} == before


def test_synth_unknown_kind_lists_valid_kinds(capsys, clean_dir, tmp_path):
    code, _, err = synth(capsys, clean_dir, tmp_path / "a", "rain")
    assert code == 1
    assert all(k in err for k in ("lowlight", "haze", "blur"))


def test_synth_empty_dir(capsys, tmp_path):
    (tmp_path / "empty").mkdir()
    code, _, err = synth(capsys, tmp_path / "empty", tmp_path / "a")
    assert code == 1 and "no .png" in err


# --------------------------------------------------------------------- train


@pytest.fixture
def pairs(capsys, clean_dir, tmp_path):
    synth(capsys, clean_dir, tmp_path / "pairs", "haze")
    return tmp_path / "pairs" / "manifest.tsv"


def test_train_zero_steps_writes_initial_weights(capsys, pairs, tmp_path):
    ck = tmp_path / "m.ckpt"
    code, _, err = run(capsys, "train", "--manifest", pairs, "--out", ck, "--seed", 3,
                       *sets("train.total_steps=0"))
    assert code == 0
    assert "# train.total_steps = 0" in err and "# model.C = 4" in err
    _, entries = read_checkpoint(ck)
    from uhdformer.rng import substream
    fresh = build_model(UHDformerConfig(C=4, L=3, heads=2, r=2, s=2), substream(3, "model"))
    assert all(np.array_equal(entries[k], p.data) for k, p in fresh.registry.items())


def test_train_logs_schedule_endpoints_and_is_deterministic(capsys, pairs, tmp_path):
    outs = []
    for tag in "ab":
        log = tmp_path / f"{tag}.log"
        code, _, _ = run(capsys, "train", "--manifest", pairs, "--out", tmp_path / f"{tag}.ckpt",
                         "--log", log, "--seed", 1, *sets("train.total_steps=3"))
        assert code == 0
        outs.append(log.read_text())
    rows = [ln.split("\t") for ln in outs[0].splitlines() if not ln.startswith("#")]
    assert [r[0] for r in rows] == ["0", "1", "2"]
    assert float(rows[0][1]) == 5e-4 and float(rows[-1][1]) == 1e-7
    assert "# done: 3 steps" in outs[0]
    steps = [[ln for ln in text.splitlines() if not ln.startswith("#")] for text in outs]
    assert steps[0] == steps[1]
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_train_with_config_file(capsys, pairs, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[model]\nC = 4\nL = 3\nheads = 2\nr = 2\ns = 2\n\n[train]\ntotal_steps = 1\n"
                   "patch_size = 16\nbatch_size = 1\n\n[data]\nmanifest = pairs/manifest.tsv\n"
                   "checkpoint = out.ckpt\n")
    code, _, _ = run(capsys, "train", "--config", cfg)
    assert code == 0 and (tmp_path / "out.ckpt").exists()


def test_train_unknown_key_is_named(capsys, pairs):
    code, _, err = run(capsys, "train", "--manifest", pairs, "--set", "train.learning_rate=1")
    assert code == 1 and "train.learning_rate" in err


def test_train_missing_manifest(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--manifest", tmp_path / "nope.tsv", *sets("train.total_steps=0"))
    assert code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_abort(capsys, pairs, tmp_path):
    log = tmp_path / "nan.log"
    code, _, err = run(capsys, "train", "--manifest", pairs, "--log", log, "--out", tmp_path / "x.ckpt",
                       *sets("train.total_steps=2", "train.lr0=1e300", "train.lr_min=1e299"))
    assert code == 3
    assert "non-finite loss" in log.read_text()
    assert not (tmp_path / "x.ckpt").exists()


def test_config_errors():
    with pytest.raises(ConfigError, match="model.width"):
        load_config(None, ["model.width=3"])
    with pytest.raises(ConfigError, match="integer"):
        load_config(None, ["model.C=abc"])
    with pytest.raises(ConfigError):
        load_config(None, ["model.C"])
    with pytest.raises(ConfigError, match="heads"):
        load_config(None, ["model.heads=3"])
    assert load_config(None, ["model.dualcmt_in_attn=off"]).model.dualcmt_in_attn is False


def test_config_unknown_section(tmp_path):
    cfg = tmp_path / "x.ini"
    cfg.write_text("[optim]\nlr = 1\n")
    with pytest.raises(ConfigError, match="optim"):
        load_config(cfg)


# --------------------------------------------------------------------- infer


def test_infer_identity_checkpoint(capsys, tmp_path):
    ck = zero_tail_checkpoint(tmp_path / "id.ckpt", C=4, L=3, heads=2, r=2, s=8)
    src = tmp_path / "in.png"
    write_image(src, buffer(16, 24, 7))
    code, out, _ = run(capsys, "infer", "--ckpt", ck, "--in", src, "--out", tmp_path / "out.ppm")
    assert code == 0
    path, size, wall = out.strip().split("\t")
    assert size == "24x16" and wall.endswith("s")
    assert np.array_equal(read_image(tmp_path / "out.ppm").pixels, read_image(src).pixels)


def test_infer_pads_and_crops_back(capsys, tmp_path):
    ck = zero_tail_checkpoint(tmp_path / "id.ckpt")
    src = tmp_path / "odd.png"
    write_image(src, buffer(65, 64, 8))
    code, out, _ = run(capsys, "infer", "--ckpt", ck, "--in", src, "--out", tmp_path / "o.png")
    assert code == 0 and "\t64x65\t" in out
    back = read_image(tmp_path / "o.png")
    assert (back.height, back.width) == (65, 64)
    assert np.array_equal(back.pixels, read_image(src).pixels)


def test_pad_to_multiple_reflects():
    x = np.arange(65 * 64, dtype=float).reshape(1, 1, 65, 64)
    p = pad_to_multiple(x, 8)
    assert p.shape == (1, 1, 72, 64)
    assert np.array_equal(p[0, 0, 65], x[0, 0, 63]) and np.array_equal(p[0, 0, 71], x[0, 0, 57])


def test_infer_missing_checkpoint(capsys, tmp_path):
    src = tmp_path / "in.png"
    write_image(src, buffer(8, 8, 1))
    code, _, _ = run(capsys, "infer", "--ckpt", tmp_path / "none.ckpt", "--in", src, "--out", tmp_path / "o.png")
    assert code == 2


def test_infer_corrupt_checkpoint(capsys, tmp_path):
    ck = zero_tail_checkpoint(tmp_path / "id.ckpt", C=4, L=3, heads=2, r=2, s=2)
    ck.write_bytes(ck.read_bytes()[:100])
    src = tmp_path / "in.png"
    write_image(src, buffer(8, 8, 1))
    code, _, err = run(capsys, "infer", "--ckpt", ck, "--in", src, "--out", tmp_path / "o.png")
    assert code == 2 and "truncated" in err


# ---------------------------------------------------------------------- eval


def _identity_manifest(tmp_path, n):
    d = tmp_path / "same"
    d.mkdir()
    lines = []
    for i in range(n):
        write_image(d / f"c{i}.png", buffer(16, 16, i))
        lines.append(f"c{i}.png\tc{i}.png\t{{}}\n")
    (d / "m.tsv").write_text("".join(lines))
    return d / "m.tsv"


def _record(path):
    lines = path.read_text().splitlines()
    assert lines[0] == "pair\tpsnr\tssim"
    return {r[0]: (float(r[1]), float(r[2])) for r in (ln.split("\t") for ln in lines[1:])}


def test_eval_clean_pairs_hit_the_cap(capsys, tmp_path):
    ck = zero_tail_checkpoint(tmp_path / "id.ckpt", C=4, L=3, heads=2, r=2, s=2)
    manifest = _identity_manifest(tmp_path, 2)
    code, out, _ = run(capsys, "eval", "--ckpt", ck, "--manifest", manifest)
    assert code == 0
    rec = _record(manifest.with_suffix(".eval.tsv"))
    assert set(rec) == {"0", "1", "mean"}
    for p, s in rec.values():
        assert p == 100.0 and s == pytest.approx(1.0, abs=1e-12)
    table = out.splitlines()
    assert table[0].split() == ["pair", "PSNR", "SSIM"]
    assert len({len(row) for row in table}) == 1  # aligned columns


def test_eval_single_pair_mean_and_record_round_trip(capsys, pairs, tmp_path):
    ck = zero_tail_checkpoint(tmp_path / "id.ckpt", C=4, L=3, heads=2, r=2, s=2)
    one = pairs.parent / "one.tsv"
    one.write_text(pairs.read_text().splitlines(keepends=True)[0])
    record = tmp_path / "rec.tsv"
    code, out, _ = run(capsys, "eval", "--ckpt", ck, "--manifest", one, "--record", record)
    assert code == 0
    rec = _record(record)
    assert rec["mean"] == rec["0"]
    printed = out.splitlines()[1].split()
    assert float(printed[1]) == pytest.approx(rec["0"][0], abs=5e-5)
    assert float(printed[2]) == pytest.approx(rec["0"][1], abs=5e-6)


def test_eval_empty_manifest(capsys, tmp_path):
    ck = zero_tail_checkpoint(tmp_path / "id.ckpt", C=4, L=3, heads=2, r=2, s=2)
    (tmp_path / "empty.tsv").write_text("# nothing\n")
    code, _, err = run(capsys, "eval", "--ckpt", ck, "--manifest", tmp_path / "empty.tsv")
    assert code == 1 and "no pairs" in err


def test_manifest_format_errors(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("a.png\tb.png\n")
    with pytest.raises(FormatError, match="3 tab-separated"):
        read_manifest(bad)
    bad.write_text("a.png\tb.png\t{oops\n")
    with pytest.raises(FormatError, match="draw"):
        read_manifest(bad)


# ----------------------------------------------------------- params/selftest


def _count(out, label):
    for line in out.splitlines():
        if line.strip().startswith(label):
            return int(line.split()[-1].replace(",", ""))
    raise AssertionError(label)


def test_params_table(capsys):
    code, out, _ = run(capsys, "params")
    assert code == 0
    total = _count(out, "total")
    assert total == 121_323 <= 500_000
    parts = ["head", "enc", "acm", "bridge", "body", "fusion", "tail"]
    assert sum(_count(out, p) for p in parts) == total
    assert _count(out, "(a) no DualCMT") == 86_763 and _count(out, "full model") == total
    code, out, _ = run(capsys, "params", "--set", "model.C=8")
    assert _count(out, "total") < total


def test_params_invalid_config(capsys):
    code, _, err = run(capsys, "params", "--set", "model.r=5")
    assert code == 1 and "r=5" in err


def test_usage_errors(capsys):
    assert run(capsys)[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "selftest", "--threads", "0")[0] == 1


def test_selftest_quick_passes(capsys):
    code, out, _ = run(capsys, "selftest", "--level", "quick", "--threads", "1")
    assert code == 0
    assert "DualCMT-oracle" in out and "FAILED" not in out


def test_selftest_injected_fault_is_named(capsys):
    code, out, _ = run(capsys, "selftest", "--inject-fault", "layer_norm")
    assert code == 3
    summary = out.strip().splitlines()[-1]
    assert "FAILED:" in summary and "gradient" in summary.lower()


@pytest.mark.skipif(shutil.which("uhdformer") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["uhdformer", "params"], capture_output=True, text=True)
    assert proc.returncode == 0 and "total" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "uhdformer.cli", "synth"], capture_output=True, text=True)
    assert proc.returncode == 1 and "required" in proc.stderr


def test_readme_config_sample_parses(tmp_path):
    import re
    from pathlib import Path

    readme = Path(__file__).resolve().parents[1] / "README.md"
    sample = re.search(r"```ini\n(.*?)```", readme.read_text(), re.S).group(1)
    (tmp_path / "c.ini").write_text(sample)
    cfg = load_config(tmp_path / "c.ini")
    assert (cfg.model.C, cfg.model.L, cfg.train.total_steps) == (8, 6, 500)
    assert cfg.data.log == str(tmp_path / "run" / "train.log")
