"""Registered finite-difference checks, one per differentiable operation.

Each case builds a small random float64 instance and returns the loss
closure plus the tensors to check.  The loss projects the output onto a
fixed random tensor so every output entry contributes.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import ops
from .gaze_shift import CrossAttention, GazeShift
from .gradcheck import NonSmoothPoint, check_gradients
from .model import ExpNet, ModelConfig, ResidualStage, training_loss
from .nefirf import NeFiRF
from .nn import Linear
from .tensor import Tensor

Case = Tuple[Callable[[], Tensor], List[Tensor], object, Optional[int]]

# finite-difference steps for compound cases whose bilinear sampling puts
# kinks close to most points
STEPS = (1e-4, 1e-5, 1e-6)


def _leaf(rng, shape, scale=1.0) -> Tensor:
    return Tensor(scale * rng.normal(size=shape), requires_grad=True)


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    r = rng.normal(size=out.shape)
    return lambda y: ops.sum(y * r)


def _case_conv2d(rng) -> Case:
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = _leaf(rng, (2, 6, 6, 3))
    w = _leaf(rng, (3, 3, 3, 4), 0.5)
    b = _leaf(rng, (4,))
    fn = lambda: ops.conv2d(x, w, b, stride, padding)
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [x, w, b], 1e-4, None


def _case_deformable(rng) -> Case:
    x = _leaf(rng, (1, 6, 6, 2))
    w = _leaf(rng, (3, 3, 2, 3), 0.5)
    b = _leaf(rng, (3,))
    ow = _leaf(rng, (3, 3, 2, 18), 0.3)
    ob = _leaf(rng, (18,), 0.5)
    fn = lambda: ops.deformable_conv2d(x, w, b, ow, ob, stride=1, padding=1)
    proj = _project(fn(), rng)
    # bilinear sampling has kinks at integer positions; a small step avoids them
    return (lambda: proj(fn())), [x, w, b, ow, ob], STEPS, None


def _case_patch_pool(rng) -> Case:
    x = _leaf(rng, (2, 8, 8, 3))
    fn = lambda: ops.patch_average_pool(x, 4)
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [x], 1e-4, None


def _case_global_pool(rng) -> Case:
    x = _leaf(rng, (2, 5, 5, 3))
    fn = lambda: ops.global_average_pool(x)
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [x], 1e-4, None


def _case_sine(rng) -> Case:
    x = _leaf(rng, (2, 4, 4, 3))
    a = _leaf(rng, (2, 1, 1, 1))
    w = _leaf(rng, (2, 1, 1, 1))
    fn = lambda: ops.elementwise_sine(x, a, w)
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [x, a, w], 1e-4, None


def _case_attention(rng) -> Case:
    attn = CrossAttention(rng, 8, 2).astype(np.float64)
    tokens = _leaf(rng, (2, 9, 8))
    mask = np.zeros((2, 9))
    for row in mask:
        row[rng.choice(9, int(rng.integers(1, 9)), replace=False)] = 1.0
    embed = Linear(rng, 8, 8).astype(np.float64)
    fn = lambda: attn.pooled(ops.layer_normalize(embed(tokens)), Tensor(mask))
    proj = _project(fn(), rng)
    return (lambda: proj(fn())), [tokens] + embed.parameters() + attn.parameters(), 1e-4, None


def _case_nefirf(rng) -> Case:
    field = NeFiRF(rng, 3, 4).astype(np.float64)
    f = _leaf(rng, (2, 8, 8, 3))
    fn = lambda: field.field_scores(f, 2)
    proj = _project(fn(), rng)
    # band selection is piecewise constant; a small step keeps ranks fixed
    return (lambda: proj(fn())), [f] + field.parameters(), 1e-4, 6


def _case_residual_stage(rng) -> Case:
    stage = ResidualStage(rng, 3, 1).astype(np.float64)
    x = _leaf(rng, (1, 5, 5, 3))
    proj = _project(stage(x), rng)
    return (lambda: proj(stage(x))), [x] + stage.parameters(), 1e-4, 6


def _case_gaze_shift(rng) -> Case:
    shift = GazeShift(rng, 2, 8, 2, 8, 2, 1).astype(np.float64)
    shift.deform.offset_weight.data[...] = 0.1 * rng.normal(size=shift.deform.offset_weight.shape)
    f = _leaf(rng, (2, 8, 8, 2))
    # jittered frozen surrogate, see ExpNet.frozen_saliency
    shift.saliency._frozen = {"jitter": 1e-2, "seed": (0,)}
    fn = lambda: shift(f)
    r1 = rng.normal(size=fn().focal_next.shape)
    r2 = rng.normal(size=fn().impression.shape)

    def loss():
        out = fn()
        return ops.sum(out.focal_next * r1) + ops.sum(out.impression * r2)

    return loss, [f] + shift.parameters(), STEPS, 4


def tiny_model_config(**changes) -> ModelConfig:
    base = ModelConfig(stages=3, widths=(2, 4, 8), blocks=(1, 1, 1), p=2, num_classes=3,
                       image_size=8, hidden=4, heads=2, fusion_width=4)
    return base.replace(**changes)


def _case_model(rng, fusion: str = "mlp_add") -> Case:
    model = ExpNet(tiny_model_config(fusion=fusion, seed=int(rng.integers(1 << 30))))
    model.astype(np.float64)
    for shift in model.shifts:
        shift.deform.offset_weight.data[...] = 0.1 * rng.normal(size=shift.deform.offset_weight.shape)
    x = Tensor(rng.normal(size=(2, 8, 8, 3)))
    labels = rng.integers(0, 3, size=2)
    ctx = model.frozen_saliency(jitter=1e-2)
    ctx.__enter__()
    # the closure holds ctx so its cleanup cannot run while the case is alive
    fn = lambda ctx=ctx: training_loss(model(x), labels)
    fn()
    return fn, model.parameters(), STEPS, 2


def _case_model_ca(rng) -> Case:
    return _case_model(rng, "cross_attention")


REGISTRY: Dict[str, Callable[[np.random.Generator], Case]] = {
    "conv2d": _case_conv2d,
    "deformable_conv2d": _case_deformable,
    "patch_average_pool": _case_patch_pool,
    "global_average_pool": _case_global_pool,
    "sine_activation": _case_sine,
    "attention_path": _case_attention,
    "nefirf_scores": _case_nefirf,
    "residual_stage": _case_residual_stage,
    "gaze_shift": _case_gaze_shift,
    "full_model_mlp_add": _case_model,
    "full_model_cross_attention": _case_model_ca,
}


MAX_REDRAWS = 10


def run_case(name: str, instances: int = 10, seed: int = 0) -> float:
    """Max relative error over ``instances`` random instances of one op.

    An instance whose stencil straddles a kink (ReLU, max-pool tie, band
    rank swap) is redrawn, up to ``MAX_REDRAWS`` times.
    """
    return run_case_stats(name, instances, seed)[0]


def run_case_stats(name: str, instances: int = 10, seed: int = 0) -> Tuple[float, int]:
    """``(max relative error, number of redrawn instances)``."""
    builder = REGISTRY[name]
    worst, redrawn = 0.0, 0
    for i in range(instances):
        for attempt in range(MAX_REDRAWS + 1):
            rng = np.random.default_rng([seed, i, attempt])
            fn, params, eps, samples = builder(rng)
            try:
                err = check_gradients(fn, params, eps=eps, samples=samples, rng=rng,
                                      reject_kinks=True)
            except NonSmoothPoint:
                redrawn += 1
                continue
            worst = max(worst, err)
            break
        else:
            raise NonSmoothPoint(f"{name}: no smooth instance in {MAX_REDRAWS + 1} draws")
    return worst, redrawn


def run_suite(instances: int = 10, seed: int = 0) -> Dict[str, float]:
    return {name: run_case(name, instances, seed) for name in REGISTRY}
