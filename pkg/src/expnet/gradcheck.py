"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad


# a 1e-6 step carries about 2e-16 / 1e-6 = 2e-10 of round-off, so gradients
# below this floor are indistinguishable from zero at a 1e-4 tolerance
ZERO_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, ZERO_FLOOR) over coordinates."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ZERO_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


class NonSmoothPoint(ValueError):
    """The probed point sits within a few steps of a kink."""


def numeric_gradient(
    fn: Callable[[], Tensor],
    param: Tensor,
    eps: float = 1e-4,
    coords: Optional[Sequence[int]] = None,
    detect_kinks: bool = False,
):
    """Fourth-order central differences of scalar ``fn()`` w.r.t. ``param``.

    Uses the five-point stencil ``(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h``
    so truncation error is O(h^4) and ``h`` can stay large enough to keep
    round-off small on coordinates with tiny gradients.

    With ``detect_kinks`` the same stencil is also taken at step ``2h`` (two
    extra evaluations) and a boolean array marking coordinates where the two
    estimates agree is returned as well.  Only function values enter this
    test, so it cannot hide a wrong backward pass.
    """
    if not param.data.flags.c_contiguous:
        param.data = np.ascontiguousarray(param.data)
    flat = param.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    smooth = np.ones(len(coords), dtype=bool)

    def at(i, value):
        flat[i] = value
        return float(fn().data)

    with no_grad():
        for n, i in enumerate(coords):
            orig = flat[i]
            d1 = at(i, orig + eps) - at(i, orig - eps)
            d2 = at(i, orig + 2 * eps) - at(i, orig - 2 * eps)
            out[n] = (8 * d1 - d2) / (12 * eps)
            if detect_kinks:
                d4 = at(i, orig + 4 * eps) - at(i, orig - 4 * eps)
                wide = (8 * d2 - d4) / (24 * eps)
                tol = KINK_RTOL * max(abs(wide), abs(out[n])) + KINK_ROUNDOFF / eps
                smooth[n] = abs(wide - out[n]) <= tol
            flat[i] = orig
    return (out, smooth) if detect_kinks else out


# agreement required between the h and 2h stencils; the absolute part is the
# round-off scale of a difference quotient with step h
KINK_RTOL = 1e-6
KINK_ROUNDOFF = 1e-13


def adaptive_numeric_gradient(fn, param: Tensor, steps: Sequence[float],
                              coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Per coordinate, the first step in ``steps`` whose stencil is kink-free.

    Large steps keep round-off small on tiny gradients; smaller ones are
    tried only where the larger stencil straddles a kink.  Raises
    :class:`NonSmoothPoint` if every step straddles one.
    """
    coords = list(range(param.size)) if coords is None else list(coords)
    out = np.zeros(len(coords))
    todo = np.arange(len(coords))
    for h in steps:
        values, smooth = numeric_gradient(fn, param, h, [coords[j] for j in todo],
                                          detect_kinks=True)
        out[todo[smooth]] = values[smooth]
        todo = todo[~smooth]
        if not len(todo):
            return out
    raise NonSmoothPoint("finite-difference stencil straddles a kink at every step")


def analytic_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list:
    for p in params:
        p.zero_grad()
    loss = fn()
    loss.backward()
    return [p.grad.copy() for p in params]


def check_gradients(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps=1e-4,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    reject_kinks: bool = False,
) -> float:
    """Max relative error between backprop and finite differences.

    With ``samples`` set, only that many random coordinates per parameter are
    probed; otherwise every coordinate is.  With ``reject_kinks``, ``eps``
    may be a sequence of steps tried in order per coordinate (see
    :func:`adaptive_numeric_gradient`) and a point where all of them straddle
    a kink raises :class:`NonSmoothPoint`.
    """
    rng = rng or np.random.default_rng(0)
    grads = analytic_gradients(fn, params)
    worst = 0.0
    for p, g in zip(params, grads):
        coords = None
        if samples is not None and p.size > samples:
            coords = rng.choice(p.size, size=samples, replace=False)
        if reject_kinks:
            steps = [eps] if np.isscalar(eps) else list(eps)
            numeric = adaptive_numeric_gradient(fn, p, steps, coords)
        else:
            numeric = numeric_gradient(fn, p, eps=eps, coords=coords)
        analytic = g.reshape(-1) if coords is None else g.reshape(-1)[coords]
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def finite_difference_check(
    fn: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-4
) -> float:
    """Check a scalar function of a single tensor at ``point``."""
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64),
               requires_grad=True)
    return check_gradients(lambda: fn(x), [x], eps=eps)
