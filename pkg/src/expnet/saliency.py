"""Run a trained model over a dataset and score its saliency maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import Dataset
from .metrics import (TAUS, Box, EvalRecord, box_or_full, dice, gt_known, iou,
                      maxbox_acc, random_map_gt_known, top1_loc, upsample_saliency, write_report)
from .model import ExpNet
from .nefirf import SaliencyMap
from .serialize import save_tensor
from .tensor import no_grad


@dataclass
class SaliencyBatch:
    """Per-stage binary maps and scores, each ``(N, p, p)``, plus predictions."""

    binary: List[np.ndarray]
    scores: List[np.ndarray]
    predictions: np.ndarray


def _check_stage(model: ExpNet, stage: int) -> None:
    if not 1 <= stage <= model.cfg.stages - 1:
        raise ValueError(f"unknown stage {stage}: this model has saliency stages 1..{model.cfg.stages - 1}")


def collect_saliency(model: ExpNet, images: np.ndarray, batch_size: int = 32) -> SaliencyBatch:
    if not model.cfg.focal:
        raise ValueError("model has no Gaze-Shift stages, so no saliency maps")
    binary: List[List[np.ndarray]] = [[] for _ in range(model.cfg.stages - 1)]
    scores: List[List[np.ndarray]] = [[] for _ in range(model.cfg.stages - 1)]
    preds = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = model(images[start : start + batch_size])
            preds.append(np.argmax(out.logits.data, axis=-1))
            for s, m in enumerate(out.saliency_maps):
                binary[s].append(np.asarray(m.binary))
                scores[s].append(np.asarray(m.scores))
    return SaliencyBatch([np.concatenate(b) for b in binary], [np.concatenate(s) for s in scores],
                         np.concatenate(preds))


def localization(model: ExpNet, data: Dataset, stage: int = 1, baseline_trials: int = 1000,
                 seed: int = 0) -> Tuple[Dict[str, float], List[EvalRecord]]:
    """Box metrics from stage ``stage`` maps against the glyph boxes."""
    if data.boxes is None:
        raise ValueError("dataset has no ground-truth boxes")
    _check_stage(model, stage)
    cfg = model.cfg
    sal = collect_saliency(model, data.images)
    size = data.image_size
    records, score_maps, counts = [], [], []
    for i in range(len(data)):
        binary = sal.binary[stage - 1][i]
        pm = upsample_saliency(SaliencyMap(binary, sal.scores[stage - 1][i], stage), stage, size, cfg.stages)
        box, fell_back = box_or_full(pm, size)
        gt = Box(*(int(v) for v in data.boxes[i]))
        records.append(EvalRecord(pm, box, int(sal.predictions[i]), int(data.labels[i]), gt, fell_back))
        score_maps.append(upsample_saliency(sal.scores[stage - 1][i], stage, size, cfg.stages))
        counts.append(int(binary.sum()))
    pred_boxes = [r.box for r in records]
    gt_boxes = [r.gt_box for r in records]
    metrics = {
        "gt_known": gt_known(pred_boxes, gt_boxes),
        "top1_loc": top1_loc(pred_boxes, gt_boxes, sal.predictions, data.labels),
        "maxboxacc_v1": maxbox_acc(score_maps, gt_boxes, "V1"),
        "maxboxacc_v2": maxbox_acc(score_maps, gt_boxes, "V2"),
        "random_map_gt_known": random_map_gt_known(
            gt_boxes, counts, cfg.p, size, baseline_trials, np.random.default_rng(seed)),
        "mean_focus_fraction": float(np.mean(counts)) / cfg.p ** 2,
        "fallback_events": float(sum(r.fallback for r in records)),
        "classification_accuracy": float(np.mean(sal.predictions == data.labels)),
    }
    return metrics, records


def segmentation(model: ExpNet, data: Dataset, stages: Tuple[int, int] = (2, 3)) -> Dict[str, float]:
    """IoU/Dice of stage maps against the outer and inner shape masks."""
    if data.masks is None:
        raise ValueError("dataset has no ground-truth masks")
    for stage in stages:
        _check_stage(model, stage)
    cfg = model.cfg
    sal = collect_saliency(model, data.images)
    size = data.image_size
    out: Dict[str, float] = {}
    for channel, (name, stage) in enumerate(zip(("outer", "inner"), stages)):
        ious, dices = [], []
        for i in range(len(data)):
            pred = upsample_saliency(sal.binary[stage - 1][i], stage, size, cfg.stages).astype(bool)
            gt = data.masks[i, ..., channel] > 0.5
            ious.append(iou(pred, gt))
            dices.append(dice(pred, gt))
        out[f"{name}_iou"] = float(np.mean(ious))
        out[f"{name}_dice"] = float(np.mean(dices))
    out["classification_accuracy"] = float(np.mean(sal.predictions == data.labels))
    return out


def saliency_report(model: ExpNet, data: Dataset, out_dir, checkpoint: str = "", dataset: str = "",
                    stage: Optional[int] = None, seed: int = 0, export_masks: bool = True) -> Dict[str, float]:
    """Write ``report.txt`` and, optionally, per-image pixel masks and boxes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "checkpoint": checkpoint,
        "dataset": dataset,
        "mapping": "reconstructed saliency-to-prediction mapping",
        "tau_step": f"{TAUS[1] - TAUS[0]:.2f}",
    }
    if data.masks is not None:
        header["stages"] = "outer=2 inner=3"
        metrics = segmentation(model, data)
    else:
        st = stage or 1
        header["stages"] = f"localization={st}"
        metrics, records = localization(model, data, st, seed=seed)
        if export_masks:
            (out / "masks").mkdir(exist_ok=True)
            lines = []
            for i, r in enumerate(records):
                save_tensor(out / "masks" / f"{i:06d}.expt", r.mask.mask.astype(np.float32))
                lines.append(" ".join(str(v) for v in (i, *r.box, r.prediction, r.label, int(r.fallback))))
            (out / "boxes.txt").write_text("# index x0 y0 x1 y1 prediction label fallback\n"
                                           + "\n".join(lines) + "\n")
    write_report(out / "report.txt", header, metrics)
    return metrics
