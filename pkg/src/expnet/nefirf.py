"""Neural Firing Fields: binary patch saliency from a conditioned coordinate field.

A small convolutional field runs over the normalised patch-centre grid.  Each
field layer is followed by ``a * sin(w * x)`` where the two scalars ``a`` and
``w`` come from the stage feature map: patch-average pool, a 1x1 projection
to an (amplitude, frequency) pair per patch, a rank-based band filter on the
frequency channel, then a global mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .nn import Conv, Linear, Module, parameter, uniform
from .tensor import Function, Tensor, as_tensor

FIELD_WIDTH = 16
# the output conv starts near sin = 1, so every patch starts as focus
FOCUS_INIT_GAIN = 0.1
BANDS = ("low", "middle", "middle", "middle", "middle", "high")

# (fraction zeroed from the high-frequency end, fraction zeroed from the low end)
BAND_RATES: Dict[str, Tuple[float, float]] = {
    "low": (0.2, 0.0),
    "middle": (0.1, 0.1),
    "high": (0.0, 0.2),
}


@dataclass
class SaliencyMap:
    """Binary focus/context assignment per patch (1 = focus).

    ``binary`` and ``scores`` are ``(p, p)`` for one image or ``(N, p, p)``
    for a batch.  ``mask`` carries the binary values into the graph with a
    straight-through gradient to ``score_tensor``.
    """

    binary: np.ndarray
    scores: np.ndarray
    stage_index: int
    mask: Optional[Tensor] = None
    score_tensor: Optional[Tensor] = None

    def __getitem__(self, i: int) -> "SaliencyMap":
        return SaliencyMap(self.binary[i], self.scores[i], self.stage_index)


def coordinate_grid(p: int) -> np.ndarray:
    """Patch centres in (-1, 1); entry ``(i, j)`` is ``(x_i, y_j)``."""
    if p < 2:
        raise ValueError(f"coordinate grid needs p >= 2, got {p}")
    c = (2 * np.arange(p) + 1) / p - 1
    grid = np.empty((p, p, 2))
    grid[..., 0] = c[:, None]
    grid[..., 1] = c[None, :]
    return grid


def band_keep_mask(freq: np.ndarray, band: str) -> np.ndarray:
    """Boolean keep-mask over the last axis of ``freq`` (patches, row-major).

    Ranks ascend by frequency; ties go to the earlier index.  ``floor(rate*N)``
    patches are removed from each filtered end.
    """
    top_rate, bottom_rate = BAND_RATES[band]
    n = freq.shape[-1]
    n_top, n_bottom = int(np.floor(top_rate * n)), int(np.floor(bottom_rate * n))
    order = np.argsort(freq, axis=-1, kind="stable")
    keep = np.ones(freq.shape, dtype=bool)
    drop = np.concatenate([order[..., :n_bottom], order[..., n - n_top:]], axis=-1)
    np.put_along_axis(keep, drop, False, axis=-1)
    return keep


class BandPass(Function):
    def forward(self, x, band):
        grid = x.shape[:-1]
        freq = x[..., 1].reshape(grid[:-2] + (grid[-2] * grid[-1],))
        self.keep = band_keep_mask(freq, band).reshape(grid + (1,)).astype(x.dtype)
        return x * self.keep

    def backward(self, grad):
        return (grad * self.keep,)


def bandpass(ampfreq, band: str) -> Tensor:
    """Zero both channels of frequency-extreme patches (hard mask)."""
    if band not in BAND_RATES:
        raise ValueError(f"unknown band {band!r}")
    return BandPass.apply(ampfreq, band=band)


class ConditionHead(Module):
    """Patch-average pool then 1x1 projection to (amplitude, frequency)."""

    FREQ = 2.0

    def __init__(self, rng: np.random.Generator, channels: int, amp: float = 1.0,
                 freq: float = FREQ):
        self.weight = parameter(uniform(rng, (channels, 2), 0.1 / np.sqrt(channels)))
        self.bias = parameter(np.array([amp, freq]))

    def __call__(self, pooled: Tensor) -> Tensor:
        return ops.matmul(pooled, self.weight) + self.bias


def encode_condition(f, k: int, head: ConditionHead) -> Tensor:
    """``(H, W, C)`` feature -> ``(p, p, 2)`` amplitude/frequency map."""
    f = as_tensor(f)
    if f.shape[-3] != f.shape[-2]:
        raise ValueError(f"encode_condition needs a square map, got {f.shape}")
    return head(ops.patch_average_pool(f, k))


def condition_to_scalars(filtered) -> Tuple[Tensor, Tensor]:
    """Mean amplitude and frequency over all patches (zeroed ones included)."""
    filtered = as_tensor(filtered)
    pooled = ops.mean(filtered, axis=(-3, -2))
    return pooled[..., 0], pooled[..., 1]


def threshold_with_repair(scores: np.ndarray) -> np.ndarray:
    """``scores >= 0.5`` with at least one focus and one context patch per map.

    All focus: the lowest score flips to context (ties -> largest index).
    All context: the highest score flips to focus (ties -> smallest index).
    """
    shape = scores.shape
    flat = scores.reshape(-1, shape[-2] * shape[-1])
    binary = (flat >= 0.5).astype(np.int8)
    n = flat.shape[1]
    for row, s in zip(binary, flat):
        if row.all():
            row[n - 1 - np.argmin(s[::-1])] = 0
        elif not row.any():
            row[np.argmax(s)] = 1
    return binary.reshape(shape)


class _SaliencyBase(Module):
    """Shared thresholding, straight-through wiring and gradcheck freezing."""

    _frozen: Optional[dict] = None

    def _finish(self, scores: Tensor, stage_index: int) -> SaliencyMap:
        binary = threshold_with_repair(scores.data)
        if self._frozen is not None:
            # gradient-check surrogate: hold (binary - scores) fixed at the base point
            key = "offset"
            if key not in self._frozen:
                offset = binary.astype(scores.dtype) - scores.data
                jitter = self._frozen.get("jitter", 0.0)
                if jitter:
                    rng = np.random.default_rng(self._frozen["seed"])
                    offset = offset + jitter * rng.uniform(0.5, 1.5, size=offset.shape)
                self._frozen[key] = offset
            mask = scores + Tensor(self._frozen[key])
        else:
            mask = ops.straight_through(scores, binary)
        return SaliencyMap(binary, scores.data.copy(), stage_index, mask=mask,
                           score_tensor=scores)


class NeFiRF(_SaliencyBase):
    """Per-stage firing field; instances never share parameters.

    Six 3x3 field convolutions (one low, four middle, one high band), each
    followed by its own conditioned sine.  The low-band output is added to
    the input of the high-band convolution.  ``band=False`` disables the
    band filters.
    """

    def __init__(self, rng: np.random.Generator, channels: int, p: int,
                 width: int = FIELD_WIDTH, band: bool = True, stage_index: int = 1):
        self.convs: List[Conv] = []
        dims = [2] + [width] * 5 + [1]
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            conv = Conv(rng, d_in, d_out, 3, 1, 1)
            bound = np.sqrt(6.0 / (9 * d_in))
            conv.weight.data[...] = uniform(rng, conv.weight.shape, bound)
            self.convs.append(conv)
        last = self.convs[-1]
        last.weight.data *= FOCUS_INIT_GAIN
        last.bias.data[...] = np.pi / (2 * ConditionHead.FREQ)
        self.heads: List[ConditionHead] = [ConditionHead(rng, channels) for _ in BANDS]
        self._p, self._band, self._stage = p, band, stage_index
        self._grid = coordinate_grid(p)

    def conditions(self, f: Tensor, k: int) -> List[Tuple[Tensor, Tensor]]:
        pooled = ops.patch_average_pool(f, k)
        out = []
        for head, band in zip(self.heads, BANDS):
            ampfreq = head(pooled)
            if self._band:
                ampfreq = bandpass(ampfreq, band)
            out.append(condition_to_scalars(ampfreq))
        return out

    def field_scores(self, f, k: int) -> Tensor:
        f = as_tensor(f)
        single = f.ndim == 3
        if single:
            f = ops.reshape(f, (1,) + f.shape)
        n, h, w, _ = f.shape
        if h != w or h % k or h // k != self._p:
            raise ValueError(f"NeFiRF: feature {h}x{w} with k={k} does not give p={self._p}")
        conds = self.conditions(f, k)
        x = Tensor(np.broadcast_to(self._grid, (n,) + self._grid.shape).astype(f.dtype))
        skip = None
        for idx, (conv, (a, wf)) in enumerate(zip(self.convs, conds)):
            if idx == len(self.convs) - 1:
                x = x + skip
            x = conv(x)
            x = ops.elementwise_sine(
                x, ops.reshape(a, (n, 1, 1, 1)), ops.reshape(wf, (n, 1, 1, 1))
            )
            if idx == 0:
                skip = x
        scores = ops.sigmoid(ops.reshape(x, (n, self._p, self._p)))
        return ops.reshape(scores, scores.shape[1:]) if single else scores

    def __call__(self, f, k: int) -> SaliencyMap:
        return self._finish(self.field_scores(f, k), self._stage)


class SpatialAttentionSaliency(_SaliencyBase):
    """Ablation stand-in for NeFiRF: a plain learned spatial attention map.

    3x3 convolution to one channel, patch-average pooled, then sigmoid.
    """

    def __init__(self, rng: np.random.Generator, channels: int, p: int, stage_index: int = 1):
        self.conv = Conv(rng, channels, 1, 3, 1, 1)
        self.conv.weight.data *= FOCUS_INIT_GAIN
        self.conv.bias.data[...] = 1.0
        self._p, self._stage = p, stage_index

    def field_scores(self, f, k: int) -> Tensor:
        f = as_tensor(f)
        logits = ops.patch_average_pool(self.conv(f), k)
        return ops.sigmoid(ops.reshape(logits, logits.shape[:-1]))

    def __call__(self, f, k: int) -> SaliencyMap:
        return self._finish(self.field_scores(f, k), self._stage)


def nefirf_forward(f, params: NeFiRF, k: int) -> SaliencyMap:
    return params(f, k)
