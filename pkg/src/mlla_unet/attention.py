"""Linear attention (shared-sum and recurrent forms) and the softmax baseline.

Inputs are laid out ``[..., N, d]``; any leading axes (batch, heads) are
carried through unchanged, so multi-head attention is simply a reshape of the
channel axis into ``heads x d`` before the call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError, NumericError
from .nn import Linear, Module
from .tensor import Tensor

DENOM_EPS = 1e-6


def feature_map_phi(x) -> Tensor:
    """``elu(x) + 1``: strictly positive, so attention denominators stay positive."""
    return ops.elu_plus_one(x)


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return ops.transpose(t, axes)


def _check_denominator(den: np.ndarray, eps: float) -> None:
    if not np.all(den - eps > 0):
        raise NumericError(
            f"linear attention denominator degenerate (min Q.Z = {float(np.min(den - eps)):.3e})"
        )


def linear_attention_global(q, k, v, eps: float = DENOM_EPS, q_den=None, k_den=None) -> Tensor:
    """``y_i = Q_i (sum_j K_j^T V_j) / (Q_i sum_j K_j^T + eps)``.

    The two sums are computed once and shared by every query.  ``q_den`` and
    ``k_den`` optionally supply separate (positive) features for the
    denominator; the MLLA block uses this to keep the normalizer free of the
    rotary encoding applied to the numerator features.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(np.asarray(x)) for x in (q, k, v))
    q_den = q if q_den is None else q_den
    k_den = k if k_den is None else k_den
    if q.shape[-2] < 1:
        raise ConfigError("linear attention needs N >= 1")
    kv = ops.matmul(_swap_last(k), v)                       # [..., d, dv]
    z = ops.sum(k_den, axis=-2, keepdims=True)               # [..., 1, d]
    num = ops.matmul(q, kv)                                  # [..., N, dv]
    den = ops.add(ops.matmul(q_den, _swap_last(z)), eps)     # [..., N, 1]
    _check_denominator(den.data, eps)
    return ops.div(num, den)


@dataclass
class RecurrentState:
    """Running sums after consuming a prefix: ``S = sum K_j^T V_j``, ``Z = sum K_j``."""

    S: np.ndarray
    Z: np.ndarray

    @classmethod
    def zeros(cls, d: int, dv: int, dtype=np.float64) -> "RecurrentState":
        return cls(np.zeros((d, dv), dtype=dtype), np.zeros(d, dtype=dtype))

    def step(self, q_i: np.ndarray, k_i: np.ndarray, v_i: np.ndarray, eps: float = DENOM_EPS) -> np.ndarray:
        self.S += np.outer(k_i, v_i)
        self.Z += k_i
        den = q_i @ self.Z + eps
        if not den - eps > 0:
            raise NumericError(f"recurrent linear attention denominator degenerate ({den - eps:.3e})")
        return (q_i @ self.S) / den


def linear_attention_recurrent(q, k, v, eps: float = DENOM_EPS) -> np.ndarray:
    """Causal form: one pass over positions, updating ``S`` and ``Z`` in place.

    Works on plain arrays ``[N, d]``, ``[N, dv]`` and is not differentiated.
    """
    q, k, v = (np.asarray(x.data if isinstance(x, Tensor) else x) for x in (q, k, v))
    n, d = q.shape
    dv = v.shape[1]
    state = RecurrentState.zeros(d, dv, dtype=np.result_type(q, k, v))
    out = np.empty((n, dv), dtype=state.S.dtype)
    for i in range(n):
        out[i] = state.step(q[i], k[i], v[i], eps)
    return out


def softmax_attention(q, k, v, scale: Optional[float] = None, return_weights: bool = False):
    """``softmax(Q K^T * scale) V`` with ``scale = 1/sqrt(d)`` by default."""
    q, k, v = (x if isinstance(x, Tensor) else Tensor(np.asarray(x)) for x in (q, k, v))
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    logits = ops.mul(ops.matmul(q, _swap_last(k)), scale)
    weights = ops.softmax(logits, axis=-1)
    out = ops.matmul(weights, v)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# raw kernels for timing (no graph recording, no finiteness scans)


def linear_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray, eps: float = DENOM_EPS) -> np.ndarray:
    kv = k.T @ v
    z = k.sum(axis=0)
    return (q @ kv) / (q @ z + eps)[:, None]


def softmax_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray, block: int = 1024) -> np.ndarray:
    """Row-blocked softmax attention; the full N x N work is done, only memory is bounded."""
    n = q.shape[0]
    scale = 1.0 / math.sqrt(q.shape[1])
    out = np.empty((n, v.shape[1]), dtype=v.dtype)
    kt = np.ascontiguousarray(k.T)
    for start in range(0, n, block):
        logits = q[start:start + block] @ kt
        logits *= scale
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        out[start:start + block] = logits @ v
    return out


# ---------------------------------------------------------------------------
# operation counts


def attention_flops(kind: str, n: int, d: int, dv: int) -> int:
    """Exact count of scalar arithmetic operations for one head.

    One multiply-accumulate, add, compare, exp or divide each counts once.

    linear:  K^T V accumulation (N d dv) + Z accumulation (N d)
             + numerators (N d dv) + denominators (N d) + eps (N) + divisions (N dv)
    softmax: logits (N^2 d) + scale, row max, shift, exp, row sum, normalize
             (6 N^2) + weighted values (N^2 dv)
    """
    if min(n, d, dv) < 1:
        raise ConfigError(f"attention_flops needs positive sizes, got N={n}, d={d}, dv={dv}")
    if kind == "linear":
        return n * (2 * d * dv + 2 * d + 1 + dv)
    if kind == "softmax":
        return n * n * (d + dv + 6)
    raise ConfigError(f"unknown attention kind {kind!r}")


def attention_matmul_macs(n: int, d: int, dv: int) -> int:
    """Portion of the linear count carried out as matrix products (K^T V, Q S, Q Z)."""
    return n * (2 * d * dv + d)


def loglog_slope(ns, values) -> Tuple[float, float]:
    """Least-squares slope of log(values) against log(ns) and the residual norm."""
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    a = np.vstack([x, np.ones_like(x)]).T
    coef, res, _, _ = np.linalg.lstsq(a, y, rcond=None)
    resid = float(np.sqrt(res[0])) if res.size else 0.0
    return float(coef[0]), resid


class AttentionParams(Module):
    """Query/key/value projections for ``heads`` heads of width ``head_dim``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ConfigError(f"heads={heads} must divide the embedding dim {dim}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, N, C] -> [B, heads, N, C/heads]."""
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)
