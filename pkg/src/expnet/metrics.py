"""Weakly-supervised localization and segmentation from intermediate saliency maps.

Stage assignment (a reconstruction; the saliency-to-prediction mapping is
not pinned down by the original method): detail-regime localization uses
the first-stage map, structure-regime outer/inner segmentation uses the
second and third.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .nefirf import SaliencyMap

TAUS = np.round(np.arange(21) * 0.05, 2)
V2_IOU_THRESHOLDS = (0.3, 0.5, 0.7)


class EmptyMaskError(ValueError):
    pass


class Box(NamedTuple):
    """Inclusive-exclusive pixel box."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def validate(self, size: Optional[int] = None) -> "Box":
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {tuple(self)}")
        if min(self) < 0 or (size is not None and max(self.x1, self.y1) > size):
            raise ValueError(f"box {tuple(self)} outside the image")
        return self


@dataclass
class PixelMask:
    mask: np.ndarray  # (H, W) bool
    stage: int
    threshold: float = 0.5


@dataclass
class EvalRecord:
    mask: PixelMask
    box: Box
    prediction: int
    label: int
    gt_box: Optional[Box] = None
    fallback: bool = False


def upsample_saliency(m: Union[SaliencyMap, np.ndarray], stage: int, image_size: int,
                      stages: int = 4, threshold: float = 0.5):
    """Nearest-neighbour expansion of a ``(p, p)`` map to image resolution.

    A binary ``SaliencyMap`` gives a ``PixelMask``; a raw real array (scores)
    gives an ``(image_size, image_size)`` score map.  Each patch at stage
    ``stage`` covers ``image_size / p`` pixels per axis: its ``k`` feature
    pixels times the stage's cumulative downsampling factor.
    """
    if not 1 <= stage <= stages - 1:
        raise ValueError(f"unknown stage {stage}: saliency stages are 1..{stages - 1}")
    grid = np.asarray(m.binary if isinstance(m, SaliencyMap) else m)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ValueError(f"saliency map must be square p x p, got {grid.shape}")
    p = grid.shape[0]
    if image_size % p:
        raise ValueError(f"image size {image_size} not divisible by p={p}")
    f = image_size // p
    up = np.repeat(np.repeat(grid, f, axis=0), f, axis=1)
    if isinstance(m, SaliencyMap):
        return PixelMask(up.astype(bool), stage, threshold)
    return up


def mask_to_bbox(mask: Union[PixelMask, np.ndarray]) -> Box:
    arr = np.asarray(mask.mask if isinstance(mask, PixelMask) else mask).astype(bool)
    if not arr.any():
        raise EmptyMaskError("empty mask")
    rows = np.flatnonzero(arr.any(axis=1))
    cols = np.flatnonzero(arr.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def box_or_full(mask, size: int) -> Tuple[Box, bool]:
    """``mask_to_bbox`` with the full-image fallback; returns ``(box, fell_back)``."""
    try:
        return mask_to_bbox(mask), False
    except EmptyMaskError:
        return Box(0, 0, size, size), True


def _as_mask(x) -> Optional[np.ndarray]:
    if isinstance(x, PixelMask):
        return np.asarray(x.mask).astype(bool)
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return x.astype(bool)
    return None


def _as_box(x) -> Optional[Box]:
    if isinstance(x, Box):
        return x
    if isinstance(x, (tuple, list)) and len(x) == 4:
        return Box(*(int(v) for v in x))
    if isinstance(x, np.ndarray) and x.shape == (4,):
        return Box(*(int(v) for v in x))
    return None


def iou(a, b) -> float:
    """Intersection over union of two boxes or two masks."""
    ma, mb = _as_mask(a), _as_mask(b)
    if ma is not None and mb is not None:
        if ma.shape != mb.shape:
            raise ValueError(f"mask extents differ: {ma.shape} vs {mb.shape}")
        union = int(np.count_nonzero(ma | mb))
        return 1.0 if union == 0 else int(np.count_nonzero(ma & mb)) / union
    ba, bb = _as_box(a), _as_box(b)
    if ba is None or bb is None:
        raise TypeError("iou needs two boxes or two masks of the same kind")
    ba.validate()
    bb.validate()
    iw = max(0, min(ba.x1, bb.x1) - max(ba.x0, bb.x0))
    ih = max(0, min(ba.y1, bb.y1) - max(ba.y0, bb.y0))
    inter = iw * ih
    return inter / (ba.area + bb.area - inter)


def dice(a, b) -> float:
    ma, mb = _as_mask(a), _as_mask(b)
    if ma is None or mb is None:
        raise TypeError("dice needs two masks")
    if ma.shape != mb.shape:
        raise ValueError(f"mask extents differ: {ma.shape} vs {mb.shape}")
    total = int(np.count_nonzero(ma)) + int(np.count_nonzero(mb))
    return 1.0 if total == 0 else 2 * int(np.count_nonzero(ma & mb)) / total


def _check_aligned(*seqs) -> int:
    n = len(seqs[0])
    if any(len(s) != n for s in seqs):
        raise ValueError("metric inputs have different lengths")
    if n == 0:
        raise ValueError("metric inputs are empty")
    return n


def gt_known(pred_boxes: Sequence, gt_boxes: Sequence, iou_threshold: float = 0.5) -> float:
    """Fraction of boxes with IoU >= threshold, class ignored."""
    n = _check_aligned(pred_boxes, gt_boxes)
    return sum(iou(p, g) >= iou_threshold for p, g in zip(pred_boxes, gt_boxes)) / n


def top1_loc(pred_boxes: Sequence, gt_boxes: Sequence, class_preds: Sequence, labels: Sequence,
             iou_threshold: float = 0.5) -> float:
    n = _check_aligned(pred_boxes, gt_boxes, class_preds, labels)
    hits = sum(
        int(c) == int(y) and iou(p, g) >= iou_threshold
        for p, g, c, y in zip(pred_boxes, gt_boxes, class_preds, labels)
    )
    return hits / n


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected component; ties go to the lowest label."""
    labels, count = ndimage.label(mask)
    if count <= 1:
        return mask.astype(bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def maxbox_acc(score_maps: Sequence[np.ndarray], gt_boxes: Sequence, version: str = "V1",
               iou_thresholds: Optional[Sequence[float]] = None,
               largest: Optional[bool] = None, taus: np.ndarray = TAUS) -> float:
    """Threshold-sweep box accuracy.

    V1 uses the whole foreground at IoU 0.5; V2 the largest connected
    component averaged over IoU thresholds 0.3/0.5/0.7.  Both rules can be
    overridden for consistency checks.  An empty mask scores 0 at that tau.
    """
    if version not in ("V1", "V2"):
        raise ValueError(f"version must be V1 or V2, got {version!r}")
    n = _check_aligned(score_maps, gt_boxes)
    if iou_thresholds is None:
        iou_thresholds = (0.5,) if version == "V1" else V2_IOU_THRESHOLDS
    if largest is None:
        largest = version == "V2"
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    # ious[t, i]: IoU of image i's box at tau t (-1 for an empty mask)
    ious = np.full((len(taus), n), -1.0)
    for i, (scores, gt) in enumerate(zip(score_maps, gt_boxes)):
        scores = np.asarray(scores)
        for t, tau in enumerate(taus):
            mask = scores >= tau
            if not mask.any():
                continue
            if largest:
                mask = largest_component(mask)
            ious[t, i] = iou(mask_to_bbox(mask), gt)
    hit = ious[:, :, None] >= thresholds[None, None, :]
    return float(np.max(hit.mean(axis=1).mean(axis=1)))


def random_map_gt_known(gt_boxes: Sequence, focus_counts: Sequence[int], p: int, image_size: int,
                        trials: int = 1000, rng: Optional[np.random.Generator] = None,
                        iou_threshold: float = 0.5) -> float:
    """Empirical GT-Known of uniformly random p x p maps with matching focus counts."""
    n = _check_aligned(gt_boxes, focus_counts)
    rng = rng if rng is not None else np.random.default_rng(0)
    f = image_size // p
    hits = 0
    for gt, count in zip(gt_boxes, focus_counts):
        gt = _as_box(gt)
        for _ in range(trials):
            cells = rng.choice(p * p, int(count), replace=False)
            r, c = np.divmod(cells, p)
            box = Box(int(c.min()) * f, int(r.min()) * f, (int(c.max()) + 1) * f, (int(r.max()) + 1) * f)
            hits += iou(box, gt) >= iou_threshold
    return hits / (n * trials)


def write_report(path, header: Dict[str, str], metrics: Dict[str, float]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# {k}: {v}" for k, v in header.items()]
    lines += [f"{k} = {v:.6f}" if isinstance(v, float) else f"{k} = {v}" for k, v in metrics.items()]
    path.write_text("\n".join(lines) + "\n")
    return path
