"""Attention volume readouts: depth via softplus weights, AiF via softmax weights.

Scores, weights and stacks share the ``H x W x C x F`` layout (an optional
leading batch axis is allowed); the frame axis is always last.  Every
function accepts either a plain array or a :class:`Tensor` and returns the
same kind, so the readouts can sit inside a recorded computation.
"""

from __future__ import annotations

import numpy as np

from .autodiff import SOFTPLUS_LINEAR_ABOVE, Tensor, _record, as_tensor, softplus
from .stack import FocalStack, FocusAxis

DENOM_EPS = 1e-12


def _wrap(x):
    return (x, True) if isinstance(x, Tensor) else (Tensor(np.asarray(x, dtype=np.float64)), False)


def _unwrap(t: Tensor, was_tensor: bool):
    return t if was_tensor else t.data


def _check_finite(m: Tensor):
    if not np.isfinite(m.data).all():
        raise ValueError("attention scores must be finite")


def softplus_normalize(scores, eps: float = DENOM_EPS):
    """Per-pixel ``softplus(m_t) / sum_n softplus(m_n)`` over the frame axis.

    The ratio is formed after dividing by the per-pixel maximum softplus so
    that very negative score rows (where softplus is ~1e-20) still normalize
    to one; ``eps`` then only guards a denominator that is at least 1.
    """
    m, was_tensor = _wrap(scores)
    _check_finite(m)
    sp = softplus(m)
    peak = np.max(sp.data, axis=-1, keepdims=True)
    peak = np.where(peak > 0, peak, 1.0)
    scaled = sp * (1.0 / peak)
    w = scaled / (scaled.sum(axis=-1, keepdims=True) + eps)
    return _unwrap(w, was_tensor)


def softmax_normalize(scores, temperature: float = 1.0):
    """Per-pixel ``exp(tau m_t) / sum_n exp(tau m_n)`` with max subtraction."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    m, was_tensor = _wrap(scores)
    _check_finite(m)
    z = m * temperature if temperature != 1 else m
    z = z - np.max(z.data, axis=-1, keepdims=True)
    e = z.exp()
    w = e / e.sum(axis=-1, keepdims=True)
    return _unwrap(w, was_tensor)


def _positions(axis) -> np.ndarray:
    if isinstance(axis, FocusAxis):
        return axis.positions
    return FocusAxis(axis).positions


def expected_depth(weights, axis):
    """``D = sum_t w_t P_t`` -> depth map shaped ``H x W x 1``."""
    w, was_tensor = _wrap(weights)
    p = _positions(axis)
    if w.shape[-1] != p.size:
        raise ValueError(f"weights have {w.shape[-1]} frames but the focus axis has {p.size}")
    d = (w * p.astype(w.dtype)).sum(axis=-1)
    # rounding can push a convex combination a few ulps past the end positions
    lo, hi = p[0], p[-1]
    if (d.data < lo).any() or (d.data > hi).any():
        d = _record("clamp_rounding", np.clip(d.data, lo, hi), (d,), lambda g: (g,))
    return _unwrap(d, was_tensor)


def fuse_aif(weights, stack):
    """``I_k = sum_t w_t S_{k,t}``; one weight per pixel scales all colour channels."""
    w, was_tensor = _wrap(weights)
    s = stack.slices if isinstance(stack, FocalStack) else stack
    s = as_tensor(s if isinstance(s, Tensor) else np.asarray(s, dtype=w.dtype))
    if s.shape[-1] != w.shape[-1] or s.shape[:-2] != w.shape[:-2] or w.shape[-2] != 1:
        raise ValueError(f"weights shape {w.shape} does not match stack shape {s.shape}")
    out = (w * s).sum(axis=-1)
    return _unwrap(out, was_tensor)


def weight_entropy(weights) -> np.ndarray:
    """Per-pixel Shannon entropy (nats) of a weight volume over its frame axis."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, -w * np.log(w), 0.0)
    return terms.sum(axis=-1)


__all__ = [
    "DENOM_EPS",
    "SOFTPLUS_LINEAR_ABOVE",
    "softplus_normalize",
    "softmax_normalize",
    "expected_depth",
    "fuse_aif",
    "weight_entropy",
]
