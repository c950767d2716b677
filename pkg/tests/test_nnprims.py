import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from _fd import REL_TOL, fd_check
from shipfuse.nnprims import (ConvBlock, LayerSpec, NumericError, PatchAttention, PatchSequence, ShapeError,
                              conv_block, cross_attend, fold, pad_to_multiple, patchify, self_attend, zero_)


def _scalar_attention(p, a, b, c, x, residual):
    with torch.no_grad():
        p.q.weight.fill_(a)
        p.k.weight.fill_(b)
        p.v.weight.fill_(c)
        p.proj.weight.fill_(1.0)
        for lin in (p.q, p.k, p.v, p.proj):
            lin.bias.zero_()
        zero_(p.mlp)
    return p


def _hand(xq, xkv, a, b, c, residual):
    out = []
    for qi in xq:
        s = [a * qi * b * kj for kj in xkv]
        m = max(s)
        e = [math.exp(v - m) for v in s]
        val = sum(ei / sum(e) * c * kj for ei, kj in zip(e, xkv))
        out.append(qi + val if residual else val)
    return out


def test_patchify_shapes():
    s = patchify(torch.randn(1, 8, 8, 8), 4)
    assert (s.n, s.d) == (4, 128)
    one = patchify(torch.randn(1, 1, 3, 3), 3)
    assert (one.n, one.d) == (1, 9)


def test_patchify_row_major_channel_major():
    f = torch.arange(2 * 4 * 4, dtype=torch.float32).reshape(1, 2, 4, 4)
    s = patchify(f, 2)
    # patch 1 = grid row 0, col 1; channel 0 block first
    expected = torch.cat([f[0, 0, 0:2, 2:4].reshape(-1), f[0, 1, 0:2, 2:4].reshape(-1)])
    assert torch.equal(s.patches[0, 1], expected)


def test_patchify_error_names_padding():
    with pytest.raises(ShapeError, match="pad by 2 rows and 1 columns"):
        patchify(torch.zeros(1, 1, 6, 7), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_fold_patchify_bijection(b, c, rows, cols, p):
    f = torch.randn(b, c, rows * p, cols * p)
    assert torch.equal(fold(patchify(f, p)), f)


def test_fold_zeros_and_permutation():
    s = PatchSequence(torch.zeros(1, 4, 16), (2, 2, 2, 4))
    assert torch.equal(fold(s), torch.zeros(1, 4, 4, 4))
    f = torch.randn(1, 3, 4, 4)
    sp = patchify(f, 2)
    perm = sp.patches[:, [1, 0, 2, 3]]
    assert not torch.equal(fold(PatchSequence(perm, sp.grid)), f)


def test_fold_rejects_bad_grid():
    with pytest.raises(ShapeError):
        fold(PatchSequence(torch.zeros(1, 5, 16), (2, 2, 2, 4)))


def test_pad_to_multiple_reflects_and_reports_size():
    f = torch.arange(5.0).reshape(1, 1, 1, 5).repeat(1, 1, 5, 1)
    g, size = pad_to_multiple(f, 4)
    assert g.shape[-2:] == (8, 8) and size == (5, 5)
    assert torch.equal(g[0, 0, 0, 5:], torch.tensor([3.0, 2.0, 1.0]))


def test_self_attention_zero_q_v_is_identity():
    torch.manual_seed(0)
    p = PatchAttention(8, 4)
    with torch.no_grad():
        zero_(p.q), zero_(p.v), zero_(p.proj), zero_(p.mlp)
    x = torch.randn(2, 5, 8)
    assert torch.equal(self_attend(PatchSequence(x, (1, 5, 1, 8)), p).patches, x)


def test_two_patch_hand_oracles():
    a, b, c = 0.7, -1.3, 2.0
    x = torch.tensor([[[0.5], [-1.5]]], dtype=torch.float64)
    y = torch.tensor([[[2.0], [0.25]]], dtype=torch.float64)
    sa = _scalar_attention(PatchAttention(1, 1, residual=True).double(), a, b, c, x, True)
    got = sa(x)[0, :, 0].tolist()
    assert got == pytest.approx(_hand([0.5, -1.5], [0.5, -1.5], a, b, c, True), abs=1e-12)
    ca = _scalar_attention(PatchAttention(1, 1, residual=False).double(), a, b, c, x, False)
    got = ca(x, y)[0, :, 0].tolist()
    assert got == pytest.approx(_hand([0.5, -1.5], [2.0, 0.25], a, b, c, False), abs=1e-12)


def test_cross_attention_zero_v_gives_zero_pre_mlp():
    p = PatchAttention(6, 3, residual=False)
    zero_(p.v)
    with torch.no_grad():
        p.proj.bias.zero_()
    pre, _ = p.attend(torch.randn(1, 4, 6), torch.randn(1, 4, 6))
    assert torch.equal(pre, torch.zeros(1, 4, 6))


def test_cross_with_identical_inputs_matches_self_attention_term():
    torch.manual_seed(1)
    selfp = PatchAttention(6, 3, residual=True)
    crossp = PatchAttention(6, 3, residual=False)
    crossp.load_state_dict(selfp.state_dict())
    x = torch.randn(2, 4, 6)
    pre_self, _ = selfp.attend(x, x)
    pre_cross, _ = crossp.attend(x, x)
    torch.testing.assert_close(pre_self - x, pre_cross, rtol=0, atol=1e-6)


def test_cross_attend_mismatched_lengths():
    p = PatchAttention(4, 2)
    with pytest.raises(ShapeError):
        cross_attend(PatchSequence(torch.zeros(1, 2, 4), (1, 2, 1, 4)),
                     PatchSequence(torch.zeros(1, 3, 4), (1, 3, 1, 4)), p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_and_convex_combination(seed):
    g = torch.Generator().manual_seed(seed)
    p = PatchAttention(8, 4, residual=False)
    x, y = torch.randn(1, 6, 8, generator=g) * 3, torch.randn(1, 6, 8, generator=g) * 3
    pre, attn = p.attend(x, y)
    assert torch.allclose(attn.sum(-1), torch.ones(1, 6), atol=1e-6)
    # before the output projection the result lies in the convex hull of the V rows
    mixed = attn @ p.v(y)
    v = p.v(y)
    assert torch.all(mixed <= v.max(dim=1, keepdim=True).values + 1e-5)
    assert torch.all(mixed >= v.min(dim=1, keepdim=True).values - 1e-5)


def test_large_weights_stay_finite():
    torch.manual_seed(2)
    p = PatchAttention(8, 4)
    with torch.no_grad():
        for w in p.parameters():
            w.uniform_(-10, 10)
    assert torch.isfinite(p(torch.randn(1, 5, 8) * 10)).all()


def test_non_finite_output_raises():
    p = PatchAttention(4, 2)
    with torch.no_grad():
        p.mlp.fc2.bias.fill_(float("inf"))
    with pytest.raises(NumericError):
        p(torch.randn(1, 3, 4))


@pytest.mark.parametrize("residual", [True, False])
def test_attention_gradients(residual):
    torch.manual_seed(3)
    p = PatchAttention(4, 3, residual=residual).double()
    x = torch.randn(1, 2, 4, dtype=torch.float64, requires_grad=True)
    y = torch.randn(1, 2, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 2, 4, dtype=torch.float64)
    params = [q for q in p.parameters()]
    worst, probed, _ = fd_check(lambda: (p(x, y) * w).sum(), [x, y] + params)
    assert probed > 50 and worst < REL_TOL


def test_conv_block_oracles():
    ident = ConvBlock(2, [LayerSpec(2, 1, 1, None)])
    with torch.no_grad():
        ident.convs()[0].weight.copy_(torch.eye(2)[:, :, None, None])
        ident.convs()[0].bias.zero_()
    f = torch.randn(1, 2, 5, 5)
    assert torch.equal(conv_block(f, ident), f)

    zero = zero_(ConvBlock(1, [LayerSpec(3), LayerSpec(1)]))
    assert torch.equal(zero(torch.randn(1, 1, 6, 6)), torch.zeros(1, 1, 6, 6))

    ones = ConvBlock(1, [LayerSpec(1, 3, 1, None)])
    with torch.no_grad():
        ones.convs()[0].weight.fill_(1.0)
        ones.convs()[0].bias.zero_()
    imp = torch.zeros(1, 1, 7, 7)
    imp[0, 0, 3, 3] = 1
    out = ones(imp)[0, 0]
    expected = torch.zeros(7, 7)
    expected[2:5, 2:5] = 1
    assert torch.equal(out, expected)


def test_conv_block_channel_mismatch():
    with pytest.raises(ShapeError):
        ConvBlock(3, [LayerSpec(4)])(torch.zeros(1, 2, 4, 4))


def test_stride_gives_ceil_size():
    out = ConvBlock(1, [LayerSpec(4, 3, 2)])(torch.zeros(1, 1, 9, 10))
    assert out.shape[-2:] == (5, 5)


def test_shortcut_only_on_width_preserving_stride_one():
    blk = ConvBlock(2, [LayerSpec(2), LayerSpec(4), LayerSpec(4, 3, 2)], shortcut=True)
    assert [m.shortcut for m in blk.layers] == [True, False, False]
    zero_(blk)
    x = torch.randn(1, 2, 4, 4)
    # zero weights: shortcut layer passes x through, then the plain layers give silu(0) = 0
    torch.testing.assert_close(blk.layers[0](x), x)
