import numpy as np
import pytest

from uhdformer import blocks as B
from uhdformer import tensor as T
from uhdformer.acceptance import block_grad_error, brute_force_selection
from uhdformer.errors import ConfigError, ShapeError
from uhdformer.rng import Rng
from uhdformer.tensor import Tape, Tensor

F64 = np.float64


def randn(shape, seed=0, dtype=F64):
    return T.normal(shape, Rng(seed), dtype=dtype)


def basis(k, dim=16):
    v = np.zeros(dim)
    v[k] = 1.0
    return v


def planes(vectors, h=4, w=4):
    return Tensor(np.stack(vectors).reshape(1, len(vectors), h, w))


# ---------------------------------------------------------------- ConvNeXt


def test_convnext_zero_pw2_is_identity_and_shape():
    blk = B.ConvNeXtBlock(16, Rng(0))
    x = randn((1, 16, 8, 8), dtype=np.float32)
    assert blk(x).shape == x.shape
    blk.pw2.zero_()
    assert np.array_equal(blk(x).data, x.data)
    with pytest.raises(ShapeError):
        blk(randn((1, 8, 8, 8)))


def test_convnext_parameter_layout():
    blk = B.ConvNeXtBlock(4, Rng(0))
    shapes = {k: p.shape for k, p in blk.named_parameters()}
    assert shapes["dw.weight"] == (4, 1, 7, 7)
    assert shapes["pw1.weight"] == (16, 4, 1, 1)
    assert shapes["pw2.weight"] == (4, 16, 1, 1)
    assert shapes["norm.gamma"] == (1, 4, 1, 1)


# --------------------------------------------------------------------- ACM


def test_acm_shape_and_uniform_softmax_closed_form():
    acm = B.ACMBlock(16, Rng(1), F64)
    xs = [randn((1, 16, 4, 4), i) for i in range(3)]
    assert acm(*xs).shape == (1, 48, 4, 4)
    acm.pw.zero_()
    acm.dw.zero_()
    concat = np.concatenate([x.data for x in xs], axis=1)
    assert np.allclose(acm(*xs).data, concat / 48, atol=1e-15)


def test_acm_rejects_mismatched_inputs():
    acm = B.ACMBlock(4, Rng(1))
    with pytest.raises(ShapeError):
        acm(randn((1, 4, 4, 4)), randn((1, 4, 4, 4)), randn((1, 4, 2, 2)))


# --------------------------------------------------------------- selection


def test_select_self_similarity_orthogonal_channels():
    vecs = [basis(k) * (k + 1) for k in range(4)]  # orthogonal, distinct norms
    x = planes(vecs)
    res = B.cmt_select(x, x, 2)
    assert np.allclose(res.top1, 1.0)
    assert res.indices.tolist() == [[0, 1]]


def test_select_hand_computed_cosine_table():
    a, b, c, d, e, f = (basis(k) for k in range(6))
    r1 = planes([a, b, c, d])
    r2 = planes([a, -b, e, f])
    res = B.cmt_select(r1, r2, 2)
    # signed cosine: b meets -b at -1 and is orthogonal to the rest, so its best match is 0
    assert res.top1.tolist() == [[1.0, 0.0, 0.0, 0.0]]
    assert res.indices.tolist() == [[0, 1]]
    assert np.array_equal(res.selected.data[0], r1.data[0, [0, 1]])


def test_select_zero_norm_channel_scores_zero():
    r1 = planes([basis(0), np.zeros(16), basis(2), basis(3)])
    res = B.cmt_select(r1, r1, 1)
    assert np.all(res.similarity[0, 1] == 0.0) and np.all(res.similarity[0, :, 1] == 0.0)
    assert res.indices.tolist() == [[0, 2, 3, 1]]


def test_select_scale_invariance():
    rng = Rng(5)
    r1 = T.normal((1, 8, 4, 4), rng)
    r2 = T.normal((1, 8, 4, 4), rng)
    base = B.cmt_select(r1, r2, 2)
    r1s, r2s = r1.data.copy(), r2.data.copy()
    r1s[0, 3] *= 7.5
    r2s[0, 6] *= 0.01
    scaled = B.cmt_select(Tensor(r1s), Tensor(r2s), 2)
    assert np.abs(scaled.similarity - base.similarity).max() <= 1e-6
    assert np.array_equal(scaled.indices, base.indices)


def test_select_per_sample_indices():
    rng = Rng(8)
    r1 = T.normal((2, 8, 3, 3), rng)
    r2 = T.normal((2, 8, 3, 3), rng)
    res = B.cmt_select(r1, r2, 4)
    for n in range(2):
        assert res.indices[n].tolist() == brute_force_selection(r1.data[n:n + 1], r2.data[n:n + 1], 4)[0]
        assert np.array_equal(res.selected.data[n], r1.data[n, res.indices[n]])


def test_select_invalid_factor():
    x = randn((1, 6, 2, 2))
    with pytest.raises(ConfigError):
        B.cmt_select(x, x, 4)
    with pytest.raises(ShapeError):
        B.cmt_select(x, randn((1, 6, 3, 2)), 2)


def test_select_gradient_only_through_selected_values():
    r1 = randn((1, 4, 2, 2), 1)
    r2 = randn((1, 4, 2, 2), 2)
    r1.requires_grad = r2.requires_grad = True
    with Tape() as tape:
        res = B.cmt_select(r1, r2, 2)
        loss = T.sum_all(res.selected)
    tape.backward(loss)
    g = tape.grad(r1)
    chosen = set(res.indices[0].tolist())
    for c in range(4):
        assert np.all(g[0, c] == (1.0 if c in chosen else 0.0))
    assert tape.grad(r2) is None


def test_frozen_selection_replays_choices():
    r1, r2 = randn((1, 4, 2, 2), 1), randn((1, 4, 2, 2), 2)
    with B.frozen_selection() as log:
        first = B.cmt_select(r1, r2, 2).indices
        log.pos = 0
        other = B.cmt_select(randn((1, 4, 2, 2), 3), r2, 2).indices
    assert np.array_equal(first, other)
    assert B._sel.log is None


# --------------------------------------------------------------------- GFR


def test_gfr_identity_chain_and_zero_input():
    gfr = B.GFRBlock(8, 16, Rng(2), F64)
    for conv in (gfr.inner_pw1, gfr.inner_pw2):
        conv.zero_()
        conv.weight.data[:, :, 0, 0] = np.eye(8)
    gfr.inner_dw.zero_()
    gfr.inner_dw.weight.data[:, 0, 1, 1] = 1.0
    y = randn((1, 8, 4, 4))
    want = T.conv2d(Tensor(y.data * y.data), gfr.out_pw.weight, gfr.out_pw.bias).data
    assert np.allclose(gfr(y).data, want, atol=1e-14)

    zero = gfr(T.zeros((1, 8, 4, 4)))
    assert np.allclose(zero.data, np.broadcast_to(gfr.out_pw.bias.data, (1, 16, 4, 4)))
    with pytest.raises(ShapeError):
        gfr(randn((1, 4, 4, 4)))


# ----------------------------------------------------------------- DualCMT


def test_dualcmt_shape_and_divisibility():
    d = B.DualCMTBlock(16, 4, 8, Rng(3))
    out = d(randn((1, 48, 64, 64), dtype=np.float32), randn((1, 16, 8, 8), 1, np.float32))
    assert out.shape == (1, 16, 8, 8)
    with pytest.raises(ShapeError):
        d(randn((1, 48, 60, 64)), randn((1, 16, 8, 8)))
    with pytest.raises(ConfigError):
        B.DualCMTBlock(16, 3, 8, Rng(0))


def test_dualcmt_constant_channels_select_same_indices():
    d = B.DualCMTBlock(8, 2, 4, Rng(4), dtype=F64)
    vals = Rng(9).normal_array(24).reshape(1, 24, 1, 1)
    x_acm = Tensor(np.broadcast_to(vals, (1, 24, 8, 8)).copy())
    y = randn((1, 8, 2, 2))
    y_hat = d.proj(x_acm)
    mx = B.cmt_select(T.pool2d(y_hat, "max", 4), y, 2)
    mn = B.cmt_select(T.pool2d(y_hat, "mean", 4), y, 2)
    assert np.allclose(mx.similarity, mn.similarity, atol=1e-12)
    assert np.array_equal(mx.indices, mn.indices)


@pytest.mark.parametrize("use_max,use_mean,width", [(True, True, 8), (True, False, 4), (False, True, 4)])
def test_dualcmt_branch_toggles(use_max, use_mean, width):
    d = B.DualCMTBlock(8, 2, 2, Rng(0), use_max, use_mean)
    assert d.gfr.cin == width
    assert d(randn((1, 24, 4, 4), dtype=np.float32), randn((1, 8, 2, 2), dtype=np.float32)).shape == (1, 8, 2, 2)


def test_dualcmt_needs_a_branch():
    with pytest.raises(ConfigError):
        B.DualCMTBlock(8, 2, 2, Rng(0), False, False)


# -------------------------------------------------------------------- CMTA


def test_cmta_shape_zero_value_path_and_softmax_rows():
    a = B.CMTABlock(16, 8, 4, 2, Rng(5), dtype=F64)
    x_low, x_acm = randn((1, 16, 4, 4)), randn((1, 48, 8, 8), 1)
    assert a(x_low, x_acm).shape == x_low.shape

    q, k, _ = T.split_channels(a.qkv_dw(a.qkv_pw(x_low)), [16, 16, 16])
    w = a.attention_weights(q, k).data
    assert w.shape == (1, 8, 2, 2)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    a.qkv_pw.weight.data[32:] = 0
    a.qkv_pw.bias.data[:, 32:] = 0
    a.qkv_dw.bias.data[:, 32:] = 0  # V = 0 after the depthwise stage
    out = a(x_low, x_acm).data
    assert np.allclose(out, np.broadcast_to(a.out_pw.bias.data, out.shape), atol=1e-15)


def test_cmta_heads_must_divide():
    with pytest.raises(ConfigError):
        B.CMTABlock(16, 3, 4, 2, Rng(0))


def test_alpha_receives_gradient():
    a = B.CMTABlock(4, 2, 2, 2, Rng(6), dtype=F64)
    x_low, x_acm = randn((1, 4, 4, 4)), randn((1, 12, 8, 8), 1)
    with Tape() as tape:
        loss = T.sum_all(T.mul(a(x_low, x_acm), randn((1, 4, 4, 4), 2)))
    tape.backward(loss)
    ga = tape.grad(a.alpha)
    assert ga.shape == (1, 2, 1, 1) and np.all(np.abs(ga) > 0)

    before = a(x_low, x_acm).data
    a.alpha.data[...] = 1.5
    assert not np.allclose(a(x_low, x_acm).data, before)


# -------------------------------------------------------------------- CMTN


@pytest.mark.parametrize("use_dualcmt", [True, False])
def test_cmtn_shape(use_dualcmt):
    nb = B.CMTNBlock(8, 2, 2, Rng(7), use_dualcmt)
    x = randn((1, 8, 4, 4), dtype=np.float32)
    assert nb(x, randn((1, 24, 8, 8), 1, np.float32)).shape == x.shape


# ------------------------------------------------------------------ CMT-TB


@pytest.mark.parametrize("attn,ffn", [(True, True), (False, True), (True, False), (False, False)])
def test_cmttb_zero_projections_identity(attn, ffn):
    blk = B.CMTTBBlock(16, 8, 4, 8, Rng(8), attn, ffn)
    for conv in blk.final_projections():
        conv.zero_()
    x = randn((1, 16, 2, 2), dtype=np.float32)
    x_acm = randn((1, 48, 16, 16), 1, np.float32)
    assert np.array_equal(blk(x, x_acm).data, x.data)


def test_cmttb_shape():
    blk = B.CMTTBBlock(8, 2, 2, 2, Rng(9))
    x = randn((2, 8, 4, 4), dtype=np.float32)
    assert blk(x, randn((2, 24, 8, 8), 1, np.float32)).shape == x.shape


def test_ffn_projection_params_only_steer_selection():
    # with DualCMT replacing the forward features, pw/dw of CMTN feed only the
    # (non-differentiable) channel ranking, so their gradient is exactly zero
    blk = B.CMTTBBlock(4, 2, 2, 2, Rng(10), dtype=F64)
    with Tape() as tape:
        loss = T.sum_all(blk(randn((1, 4, 4, 4)), randn((1, 12, 8, 8), 1)))
    tape.backward(loss)
    assert not tape.grad(blk.ffn.pw.weight).any()
    assert tape.grad(blk.ffn.dualcmt.gfr.out_pw.weight).any()


# ---------------------------------------------------- gradients at C=8, 8x8


def _grad_cases():
    rng = Rng(21)
    yield "ConvNeXt", B.ConvNeXtBlock(8, rng, F64), [randn((1, 8, 8, 8), 1)]
    yield "ACM", B.ACMBlock(8, rng, F64), [randn((1, 8, 8, 8), i) for i in (2, 3, 4)]
    yield "GFR", B.GFRBlock(8, 8, rng, F64), [randn((1, 8, 8, 8), 5)]
    yield "DualCMT", B.DualCMTBlock(8, 2, 2, rng, dtype=F64), [randn((1, 24, 16, 16), 6), randn((1, 8, 8, 8), 7)]
    yield "CMTA", B.CMTABlock(8, 2, 2, 2, rng, dtype=F64), [randn((1, 8, 8, 8), 8), randn((1, 24, 16, 16), 9)]
    yield "CMTN", B.CMTNBlock(8, 2, 2, rng, dtype=F64), [randn((1, 8, 8, 8), 10), randn((1, 24, 16, 16), 11)]
    yield "CMT-TB", B.CMTTBBlock(8, 2, 2, 2, rng, dtype=F64), [randn((1, 8, 8, 8), 12), randn((1, 24, 16, 16), 13)]


@pytest.mark.parametrize("name,blk,inputs", list(_grad_cases()), ids=lambda v: v if isinstance(v, str) else "")
def test_block_gradients_c8(name, blk, inputs):
    err = block_grad_error(blk, inputs, blk.parameters(), Rng(99), max_coords=12)
    assert err < 1e-5, f"{name}: {err:.2e}"
