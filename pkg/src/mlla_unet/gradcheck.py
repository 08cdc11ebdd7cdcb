"""Central finite-difference verification of the backward rules."""

from __future__ import annotations

from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import NumericError
from .tensor import Tensor, backward, no_grad

DEFAULT_STEP = 1e-5


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def _scalar(f: Callable[..., Tensor], args) -> float:
    with no_grad():
        val = f(*args)
    v = float(np.asarray(val.data if isinstance(val, Tensor) else val).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError(f"function value is not finite ({v})")
    return v


def numerical_gradient(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    wrt: Tensor,
    step: float = DEFAULT_STEP,
    indices: Optional[Iterable[Tuple[int, ...]]] = None,
) -> np.ndarray:
    """Central differences of ``f(*inputs)`` along coordinates of ``wrt``.

    Coordinates not listed in ``indices`` are left as NaN.
    """
    wrt.data = np.ascontiguousarray(wrt.data)
    flat = wrt.data.reshape(-1)
    grad = np.full(flat.shape, np.nan)
    if indices is None:
        positions = range(flat.size)
    else:
        positions = [int(np.ravel_multi_index(ix, wrt.shape)) for ix in indices]
    for pos in positions:
        orig = flat[pos]
        flat[pos] = orig + step
        hi = _scalar(f, inputs)
        flat[pos] = orig - step
        lo = _scalar(f, inputs)
        flat[pos] = orig
        grad[pos] = (hi - lo) / (2 * step)
    return grad.reshape(wrt.shape)


def analytic_gradients(f: Callable[..., Tensor], inputs: Sequence[Tensor], params: Sequence[Tensor]):
    for p in params:
        p.requires_grad = True
    out = f(*inputs)
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    return backward(out, params)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = DEFAULT_STEP) -> float:
    """Max relative error between the backward pass and central differences.

    ``f`` maps ``x`` to a scalar tensor.  Runs at the precision of ``x``
    (callers use f64).
    """
    x.requires_grad = True
    grads = analytic_gradients(f, (x,), (x,))
    numeric = numerical_gradient(f, (x,), x, step)
    return float(_relative_error(grads[x], numeric).max()) if x.size else 0.0


def check_params(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = DEFAULT_STEP,
    samples: Optional[List[Tuple[int, Tuple[int, ...]]]] = None,
) -> float:
    """Max relative error over parameters of a closure ``f``.

    ``samples`` restricts the check to ``(param index, coordinate)`` pairs;
    by default every coordinate of every parameter is checked.
    """
    grads = analytic_gradients(f, (), params)
    worst = 0.0
    if samples is None:
        for p in params:
            numeric = numerical_gradient(f, (), p, step)
            worst = max(worst, float(_relative_error(grads[p], numeric).max()) if p.size else 0.0)
        return worst
    for pi, ix in samples:
        p = params[pi]
        numeric = numerical_gradient(f, (), p, step, indices=[ix])
        err = _relative_error(np.asarray(grads[p][ix]), np.asarray(numeric[ix]))
        worst = max(worst, float(err))
    return worst


def condition_for_gradcheck(module, rng: np.random.Generator):
    """Redraw a module's parameters at f64 so activations and gradients are O(1).

    At the training init (std 0.02) most gradients of a deep model are
    1e-10 or smaller, below what central differences can resolve.  Weights
    get N(0, 1/fan_in); norm scales 1 + N(0, 0.01); every other vector
    N(0, 0.01).
    """
    module.to("f64")
    for name, p in module.named_parameters():
        if p.ndim == 2:
            fan_in = p.shape[0]
        elif p.ndim == 4:
            fan_in = int(np.prod(p.shape[1:]))
        else:
            fan_in = 0
        if fan_in:
            p.data = rng.standard_normal(p.shape) / np.sqrt(fan_in)
        elif "norm" in name and name.endswith("weight"):
            p.data = 1.0 + 0.1 * rng.standard_normal(p.shape)
        else:
            p.data = 0.1 * rng.standard_normal(p.shape)
    return module
