"""Gaze-Shift: split a stage feature map into a focal feature and a context embedding.

Inside the model everything runs batched: the saliency map becomes a
``{0, 1}`` mask and the focal/context partition is expressed through it.
Zero-filling the canvas multiplies by the mask, and cross attention masks
out focal keys and averages only over focal queries.  This is the same
computation as gathering variable-length patch sets per image.  The
single-image helpers (``patchify``, ``split_patches``, ``spatial_organize``,
``conditional_position_encoding``) expose the set-based view directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .nefirf import NeFiRF, SaliencyMap, SpatialAttentionSaliency
from .nn import Conv, DeformConv, Linear, Module
from .tensor import Function, Tensor, as_tensor


@dataclass
class PatchGrid:
    """``patches`` is ``(p, p, k, k, C)``; ``positions[i, j] == (i, j)``."""

    patches: Tensor
    k: int

    @property
    def p(self) -> int:
        return self.patches.shape[0]

    @property
    def positions(self) -> np.ndarray:
        ii, jj = np.meshgrid(np.arange(self.p), np.arange(self.p), indexing="ij")
        return np.stack([ii, jj], axis=-1)


@dataclass
class PositionedPatches:
    tiles: Tensor  # (n, k, k, C)
    positions: np.ndarray  # (n, 2) grid coordinates

    def __len__(self) -> int:
        return len(self.positions)


@dataclass
class StageOutput:
    focal_next: Tensor
    impression: Tensor
    saliency: SaliencyMap


def _check_square(f: Tensor, k: int, op: str) -> int:
    h, w = f.shape[-3], f.shape[-2]
    if h != w:
        raise ValueError(f"{op}: feature map must be square, got {h}x{w}")
    if k < 1 or h % k:
        raise ValueError(f"{op}: extent {h} not divisible by patch size {k}")
    return h // k


def patchify(f, k: int) -> PatchGrid:
    f = as_tensor(f)
    p = _check_square(f, k, "patchify")
    c = f.shape[-1]
    tiles = ops.reshape(f, (p, k, p, k, c))
    return PatchGrid(ops.transpose(tiles, (0, 2, 1, 3, 4)), k)


def reassemble(grid: PatchGrid) -> Tensor:
    p, k, c = grid.p, grid.k, grid.patches.shape[-1]
    return ops.reshape(ops.transpose(grid.patches, (0, 2, 1, 3, 4)), (p * k, p * k, c))


def split_patches(grid: PatchGrid, m: SaliencyMap) -> Tuple[PositionedPatches, PositionedPatches]:
    binary = np.asarray(m.binary)
    if binary.shape != (grid.p, grid.p):
        raise ValueError(f"split_patches: map {binary.shape} does not match grid {grid.p}x{grid.p}")
    flat_tiles = ops.reshape(grid.patches, (grid.p * grid.p,) + grid.patches.shape[2:])
    flat_pos = grid.positions.reshape(-1, 2)
    focus = np.flatnonzero(binary.reshape(-1) == 1)
    context = np.flatnonzero(binary.reshape(-1) == 0)
    return (
        PositionedPatches(flat_tiles[focus], flat_pos[focus]),
        PositionedPatches(flat_tiles[context], flat_pos[context]),
    )


class Scatter(Function):
    """Place rows at ``index`` in a zero array with ``total`` rows."""

    def forward(self, values, index, total):
        self.index = index
        out = np.zeros((total,) + values.shape[1:], dtype=values.dtype)
        out[index] = values
        return out

    def backward(self, grad):
        return (grad[self.index],)


def scatter_rows(values: Tensor, index: np.ndarray, total: int) -> Tensor:
    return Scatter.apply(values, index=np.asarray(index), total=total)


def _flat_index(positions: np.ndarray, p: int) -> np.ndarray:
    return positions[:, 0] * p + positions[:, 1]


def organize_canvas(focal: PositionedPatches, h: int, k: int) -> Tensor:
    """Zero-filled ``H x W x C`` canvas with focal tiles in place, then 2-stride max pool."""
    if len(focal) == 0:
        raise ValueError("spatial_organize: empty focal set")
    p = h // k
    c = focal.tiles.shape[-1]
    grid = scatter_rows(focal.tiles, _flat_index(focal.positions, p), p * p)
    canvas = reassemble(PatchGrid(ops.reshape(grid, (p, p, k, k, c)), k))
    return ops.max_pool2d(canvas, 2, 2)


def spatial_organize(focal: PositionedPatches, h: int, k: int, deform: DeformConv) -> Tensor:
    """``(H/2, W/2, 2C)`` next-stage focal feature from the focal patch set."""
    return deform(organize_canvas(focal, h, k))


def conditional_position_encoding(
    focal_seq, focal_pos: np.ndarray, context_seq, context_pos: np.ndarray, gen: Conv, p: int
) -> Tuple[Tensor, Tensor]:
    """Encodings generated by a 3x3 convolution over the scattered token grid."""
    focal_seq, context_seq = as_tensor(focal_seq), as_tensor(context_seq)
    d = focal_seq.shape[-1]
    tokens = ops.concat([focal_seq, context_seq], axis=0)
    index = np.concatenate([_flat_index(focal_pos, p), _flat_index(context_pos, p)])
    grid = ops.reshape(scatter_rows(tokens, index, p * p), (p, p, d))
    enc = ops.reshape(gen(grid), (p * p, d))
    return enc[_flat_index(focal_pos, p)], enc[_flat_index(context_pos, p)]


class CrossAttention(Module):
    """Multi-head scaled dot-product attention, no class token."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"hidden size {dim} not divisible by {heads} heads")
        self.q = Linear(rng, dim, dim)
        # softmax ignores a key bias
        self.k = Linear(rng, dim, dim, bias=False)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self._heads = heads

    def _split(self, x: Tensor) -> Tensor:
        n, length, d = x.shape
        h = self._heads
        return ops.transpose(ops.reshape(x, (n, length, h, d // h)), (0, 2, 1, 3))

    def attend(self, queries: Tensor, keys: Tensor, key_mask: Optional[Tensor] = None):
        """Returns ``(output (N, Lq, D), weights (N, heads, Lq, Lk))``."""
        n, lq, d = queries.shape
        q = self._split(self.q(queries))
        k = self._split(self.k(keys))
        v = self._split(self.v(keys))
        scale = 1.0 / np.sqrt(d // self._heads)
        logits = ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))) * scale
        if key_mask is None:
            weights = ops.softmax(logits, axis=-1)
        else:
            weights = ops.masked_softmax(logits, ops.reshape(key_mask, (n, 1, 1, -1)))
        mixed = ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3))
        return self.out(ops.reshape(mixed, (n, lq, d))), weights

    def pooled(self, tokens: Tensor, focal_mask: Tensor) -> Tensor:
        """Focal tokens query context tokens; mean over focal queries.

        ``tokens`` is ``(N, P, D)`` over the whole grid and ``focal_mask``
        ``(N, P)`` marks the focal ones.
        """
        out, _ = self.attend(tokens, tokens, 1.0 - focal_mask)
        m = ops.reshape(focal_mask, focal_mask.shape + (1,))
        return ops.sum(out * m, axis=1) / ops.sum(m, axis=1)

    def __call__(self, focal_seq, context_seq) -> Tensor:
        """Single image: ``(n_f, D)`` queries over ``(n_c, D)`` context -> ``(D,)``."""
        focal_seq, context_seq = as_tensor(focal_seq), as_tensor(context_seq)
        if len(focal_seq.shape) != 2 or focal_seq.shape[0] == 0 or context_seq.shape[0] == 0:
            raise ValueError("cross_attention needs non-empty (n, D) focal and context sequences")
        out, _ = self.attend(ops.reshape(focal_seq, (1,) + focal_seq.shape),
                             ops.reshape(context_seq, (1,) + context_seq.shape))
        return ops.mean(out, axis=(0, 1))


def cross_attention(focal_seq, context_seq, params: CrossAttention) -> Tensor:
    return params(focal_seq, context_seq)


def tile_tokens(f: Tensor, k: int) -> Tensor:
    """``(N, H, W, C)`` -> ``(N, p*p, k*k*C)`` flattened tiles in row-major patch order."""
    n, h, w, c = f.shape
    p = h // k
    tiles = ops.transpose(ops.reshape(f, (n, p, k, p, k, c)), (0, 1, 3, 2, 4, 5))
    return ops.reshape(tiles, (n, p * p, k * k * c))


def upsample_mask(f: Tensor, mask: Tensor, k: int) -> Tensor:
    """Multiply ``(N, H, W, C)`` by a ``(N, p, p)`` patch mask."""
    n, h, w, c = f.shape
    p = h // k
    tiles = ops.reshape(f, (n, p, k, p, k, c))
    return ops.reshape(tiles * ops.reshape(mask, (n, p, 1, p, 1, 1)), (n, h, w, c))


class GazeShift(Module):
    """One Gaze-Shift between two residual stages.

    ``sine=False`` uses a spatial-attention saliency instead of NeFiRF;
    ``band=False`` disables NeFiRF's band filters; ``ci=False`` replaces the
    cross-attention impression with a convolutional embedding of the
    spatially organised context patches.
    """

    def __init__(self, rng: np.random.Generator, channels: int, size: int, p: int,
                 hidden: int, heads: int, stage_index: int, ci: bool = True,
                 sine: bool = True, band: bool = True):
        if size % p:
            raise ValueError(f"feature size {size} not divisible by p={p}")
        k = size // p
        if sine:
            self.saliency = NeFiRF(rng, channels, p, band=band, stage_index=stage_index)
        else:
            self.saliency = SpatialAttentionSaliency(rng, channels, p, stage_index=stage_index)
        self.deform = DeformConv(rng, channels, 2 * channels)
        if ci:
            self.embed = Linear(rng, k * k * channels, hidden)
            self.position = Conv(rng, hidden, hidden, 3, 1, 1)
            self.position.weight.data *= 0.1
            self.attention = CrossAttention(rng, hidden, heads)
        else:
            self.context_conv = Conv(rng, channels, 2 * channels)
            self.context_proj = Linear(rng, 2 * channels, hidden)
        self._k, self._p, self._ci = k, p, ci

    @property
    def k(self) -> int:
        return self._k

    def impression(self, f: Tensor, mask: Tensor) -> Tensor:
        n = f.shape[0]
        p, k = self._p, self._k
        if not self._ci:
            context = upsample_mask(f, 1.0 - mask, k)
            pooled = ops.global_average_pool(self.context_conv(ops.max_pool2d(context, 2, 2)))
            return self.context_proj(pooled)
        tokens = self.embed(tile_tokens(f, k))
        d = tokens.shape[-1]
        enc = self.position(ops.reshape(tokens, (n, p, p, d)))
        tokens = ops.layer_normalize(tokens + ops.reshape(enc, (n, p * p, d)))
        return self.attention.pooled(tokens, ops.reshape(mask, (n, p * p)))

    def __call__(self, f: Tensor) -> StageOutput:
        m = self.saliency(f, self._k)
        focal_next = self.deform(ops.max_pool2d(upsample_mask(f, m.mask, self._k), 2, 2))
        return StageOutput(focal_next, self.impression(f, m.mask), m)


def gaze_shift_forward(f, stage_params: GazeShift) -> StageOutput:
    f = as_tensor(f)
    if f.ndim == 3:
        out = stage_params(ops.reshape(f, (1,) + f.shape))
        return StageOutput(
            ops.reshape(out.focal_next, out.focal_next.shape[1:]),
            ops.reshape(out.impression, out.impression.shape[1:]),
            out.saliency[0],
        )
    return stage_params(f)
