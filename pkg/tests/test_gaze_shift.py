import numpy as np
import pytest

from expnet import ops
from expnet.gaze_shift import (CrossAttention, GazeShift, conditional_position_encoding,
                               cross_attention, gaze_shift_forward, organize_canvas, patchify,
                               reassemble, spatial_organize, split_patches, upsample_mask)
from expnet.nefirf import SaliencyMap
from expnet.nn import Conv, DeformConv
from expnet.tensor import Tensor


def smap(binary):
    binary = np.asarray(binary)
    return SaliencyMap(binary, binary.astype(float), 1)


# patch grids -------------------------------------------------------------------


def test_patchify_shape_and_roundtrip():
    f = np.random.default_rng(0).normal(size=(8, 8, 3))
    grid = patchify(f, 2)
    assert grid.patches.shape == (4, 4, 2, 2, 3)
    assert np.array_equal(reassemble(grid).data, f)
    np.testing.assert_array_equal(grid.patches.data[1, 2], f[2:4, 4:6])


def test_patchify_single_patch():
    f = np.random.default_rng(1).normal(size=(4, 4, 2))
    grid = patchify(f, 4)
    assert grid.p == 1
    np.testing.assert_array_equal(grid.patches.data[0, 0], f)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        patchify(np.zeros((6, 6, 1)), 4)


def test_split_counts_and_partition():
    f = np.random.default_rng(2).normal(size=(4, 4, 2))
    grid = patchify(f, 2)
    focal, context = split_patches(grid, smap([[1, 1], [0, 1]]))
    assert (len(focal), len(context)) == (3, 1)
    rebuilt = np.zeros_like(f)
    for part in (focal, context):
        for tile, (i, j) in zip(part.tiles.data, part.positions):
            rebuilt[2 * i : 2 * i + 2, 2 * j : 2 * j + 2] = tile
    assert np.array_equal(rebuilt, f)


def test_split_rejects_shape_mismatch():
    grid = patchify(np.zeros((4, 4, 1)), 2)
    with pytest.raises(ValueError):
        split_patches(grid, smap(np.ones((3, 3))))


# spatial organisation ---------------------------------------------------------------


def test_spatial_organize_shape():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(8, 8, 4))
    m = np.ones((4, 4))
    m[0, 0] = 0
    focal, _ = split_patches(patchify(f, 2), smap(m))
    out = spatial_organize(focal, 8, 2, DeformConv(rng, 4, 8))
    assert out.shape == (4, 4, 8)


def test_single_constant_patch_after_pooling():
    f = np.zeros((8, 8, 1))
    f[0:2, 0:2] = 9.0
    m = np.zeros((4, 4))
    m[0, 0] = 1
    focal, _ = split_patches(patchify(f, 2), smap(m))
    pooled = organize_canvas(focal, 8, 2).data[..., 0]
    expected = np.zeros((4, 4))
    expected[0, 0] = 9.0
    np.testing.assert_array_equal(pooled, expected)


def test_all_focal_reduces_to_max_pool():
    f = np.random.default_rng(4).normal(size=(8, 8, 3))
    focal, _ = split_patches(patchify(f, 4), smap(np.ones((2, 2))))
    np.testing.assert_array_equal(organize_canvas(focal, 8, 4).data, ops.max_pool2d(f, 2, 2).data)


def test_gaze_shift_all_focal_equals_pool_then_deform():
    rng = np.random.default_rng(5)
    shift = GazeShift(rng, 2, 8, 2, 8, 2, 1)
    shift.deform.offset_weight.data[...] = 0.1 * rng.normal(size=shift.deform.offset_weight.shape)
    f = Tensor(rng.normal(size=(1, 8, 8, 2)).astype(np.float32))
    ones = Tensor(np.ones((1, 2, 2), dtype=np.float32))  # all-focal map, repair bypassed
    organised = shift.deform(ops.max_pool2d(upsample_mask(f, ones, shift.k), 2, 2))
    reference = shift.deform(ops.max_pool2d(f, 2, 2))
    np.testing.assert_array_equal(organised.data, reference.data)


# position encoding ----------------------------------------------------------------------


def _tokens(rng, n, d=4):
    return rng.normal(size=(n, d))


def test_position_encoding_zero_generator():
    rng = np.random.default_rng(6)
    gen = Conv(rng, 4, 4, 3, 1, 1)
    gen.weight.data[...] = 0
    gen.bias.data[...] = 0
    fp, cp = conditional_position_encoding(_tokens(rng, 3), np.array([[0, 0], [0, 1], [1, 1]]),
                                           _tokens(rng, 1), np.array([[1, 0]]), gen, 2)
    assert fp.shape == (3, 4) and cp.shape == (1, 4)
    assert not fp.data.any() and not cp.data.any()


def test_position_encoding_follows_positions():
    rng = np.random.default_rng(7)
    gen = Conv(rng, 4, 4, 3, 1, 1).astype(np.float64)
    fs, ps = _tokens(rng, 3), np.array([[0, 0], [1, 1], [2, 0]])
    cs, pc = _tokens(rng, 2), np.array([[0, 2], [2, 2]])
    fp, cp = conditional_position_encoding(fs, ps, cs, pc, gen, 3)
    perm = np.array([2, 0, 1])
    fp2, cp2 = conditional_position_encoding(fs[perm], ps[perm], cs, pc, gen, 3)
    np.testing.assert_array_equal(fp2.data, fp.data[perm])
    np.testing.assert_array_equal(cp2.data, cp.data)


# cross attention ---------------------------------------------------------------------------


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(8)
    attn = CrossAttention(rng, 8, 2)
    _, w = attn.attend(Tensor(rng.normal(size=(1, 3, 8))), Tensor(rng.normal(size=(1, 5, 8))))
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_single_context_token_gives_value_projection():
    rng = np.random.default_rng(9)
    attn = CrossAttention(rng, 8, 2).astype(np.float64)
    ctx = rng.normal(size=(1, 1, 8))
    out, _ = attn.attend(Tensor(rng.normal(size=(1, 4, 8))), Tensor(ctx))
    value_proj = attn.out(attn.v(Tensor(ctx))).data
    np.testing.assert_allclose(out.data, np.repeat(value_proj, 4, axis=1), atol=1e-12)


@pytest.mark.parametrize("nf,nc", [(1, 1), (3, 13), (15, 1)])
def test_impression_length_is_hidden(nf, nc):
    rng = np.random.default_rng(10)
    attn = CrossAttention(rng, 8, 4)
    e = cross_attention(rng.normal(size=(nf, 8)), rng.normal(size=(nc, 8)), attn)
    assert e.shape == (8,)


def test_impression_invariant_to_context_order():
    rng = np.random.default_rng(11)
    attn = CrossAttention(rng, 8, 2).astype(np.float64)
    fs, cs = rng.normal(size=(3, 8)), rng.normal(size=(6, 8))
    a = cross_attention(fs, cs, attn).data
    b = cross_attention(fs, cs[rng.permutation(6)], attn).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_masked_pooling_equals_set_attention():
    """Batched masked attention equals attention over the gathered sets."""
    rng = np.random.default_rng(12)
    attn = CrossAttention(rng, 8, 2).astype(np.float64)
    tokens = rng.normal(size=(1, 9, 8))
    mask = np.array([1, 0, 0, 1, 1, 0, 1, 0, 0], dtype=float)
    pooled = attn.pooled(Tensor(tokens), Tensor(mask[None])).data[0]
    direct = cross_attention(tokens[0, mask == 1], tokens[0, mask == 0], attn).data
    np.testing.assert_allclose(pooled, direct, atol=1e-12)


def test_hidden_must_divide_heads():
    with pytest.raises(ValueError):
        CrossAttention(np.random.default_rng(0), 10, 4)


# the module ------------------------------------------------------------------------------------


def test_gaze_shift_shapes():
    rng = np.random.default_rng(13)
    shift = GazeShift(rng, 8, 16, 4, 32, 4, 1)
    out = gaze_shift_forward(rng.normal(size=(16, 16, 8)).astype(np.float32), shift)
    assert out.focal_next.shape == (8, 8, 16)
    assert out.impression.shape == (32,)
    assert out.saliency.binary.shape == (4, 4)


def test_gaze_shift_partition_and_determinism():
    rng = np.random.default_rng(14)
    shift = GazeShift(rng, 4, 8, 4, 16, 2, 1)
    f = rng.normal(size=(3, 8, 8, 4)).astype(np.float32)
    a, b = shift(Tensor(f)), shift(Tensor(f))
    assert np.array_equal(a.focal_next.data, b.focal_next.data)
    assert np.array_equal(a.impression.data, b.impression.data)
    for binary in a.saliency.binary:
        focal = int(binary.sum())
        assert 1 <= focal <= 15 and focal + int((binary == 0).sum()) == 16


def test_gaze_shift_gradient_suite_case():
    from expnet.gradsuite import run_case

    assert run_case("gaze_shift", instances=1) <= 1e-4
