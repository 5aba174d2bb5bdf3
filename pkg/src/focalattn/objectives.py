"""Training losses, depth evaluation metrics and the argmax sharpness baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .stack import FocalStack

DEFAULT_ALPHA = 0.002
DEFAULT_LAMBDA = 10.0
DELTA_BASE = 1.25
RATIO_FLOOR = 1e-8


def _wrap(x):
    return (x, True) if isinstance(x, Tensor) else (Tensor(np.asarray(x, dtype=np.float64)), False)


def _out(t: Tensor, was_tensor: bool):
    return t if was_tensor else float(t.data)


def _depth_mask(mask, shape) -> np.ndarray:
    """Validity mask broadcast to a depth map of ``shape`` (trailing axis 1)."""
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape == shape[:-1]:
        m = m[..., None]
    if m.shape != shape:
        raise ValueError(f"mask shape {np.shape(mask)} does not match depth shape {shape}")
    return m


# ---- losses ----------------------------------------------------------


def depth_l1_loss(pred, gt, mask=None):
    """Mean absolute depth error over valid pixels."""
    p, was_tensor = _wrap(pred)
    gt = np.asarray(gt, dtype=p.dtype)
    if p.shape != gt.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth shape {gt.shape}")
    m = _depth_mask(mask, p.shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("validity mask selects no pixels")
    loss = ((p - gt).abs() * m.astype(p.dtype)).sum() * (1.0 / count)
    return _out(loss, was_tensor)


def aif_l1_loss(pred, gt):
    """Mean absolute colour error over every pixel and channel."""
    p, was_tensor = _wrap(pred)
    gt = np.asarray(gt, dtype=p.dtype)
    if p.shape != gt.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth shape {gt.shape}")
    return _out((p - gt).abs().mean(), was_tensor)


def edge_weights(aif_gt: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """``exp(-lam/3 * sum_k |dI_k|)`` along x (columns) and y (rows), trailing axis kept."""
    img = np.asarray(aif_gt, dtype=np.float64)
    gx = np.abs(np.diff(img, axis=-2)).sum(axis=-1, keepdims=True)
    gy = np.abs(np.diff(img, axis=-3)).sum(axis=-1, keepdims=True)
    return np.exp(-lam / 3.0 * gx), np.exp(-lam / 3.0 * gy)


def smoothness_loss(depth, aif_gt, lam: float = DEFAULT_LAMBDA):
    """Edge-aware first-order smoothness of a depth map.

    Forward differences; the x term averages over ``H x (W-1)`` entries and
    the y term over ``(H-1) x W``.  Only ``depth`` receives gradients.
    """
    d, was_tensor = _wrap(depth)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    img = np.asarray(aif_gt)
    if d.shape[:-1] != img.shape[:-1] or d.shape[-1] != 1:
        raise ValueError(f"depth shape {d.shape} does not match image shape {img.shape}")
    if d.shape[-3] < 2 or d.shape[-2] < 2:
        raise ValueError(f"smoothness needs at least a 2x2 map, got {d.shape}")
    wx, wy = edge_weights(img, lam)
    dx = d[..., :, 1:, :] - d[..., :, :-1, :]
    dy = d[..., 1:, :, :] - d[..., :-1, :, :]
    loss = (dx.abs() * wx.astype(d.dtype)).mean() + (dy.abs() * wy.astype(d.dtype)).mean()
    return _out(loss, was_tensor)


@dataclass
class LossReport:
    total: float
    depth_l1: float | None = None
    aif_l1: float | None = None
    smooth: float | None = None
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "tensor"}


def supervised_loss(pred_depth, gt_depth, mask=None) -> LossReport:
    loss = depth_l1_loss(pred_depth, gt_depth, mask)
    value = float(loss.data) if isinstance(loss, Tensor) else loss
    return LossReport(total=value, depth_l1=value, tensor=loss if isinstance(loss, Tensor) else None)


def unsupervised_loss(
    pred_aif, gt_aif, pred_depth, alpha: float = DEFAULT_ALPHA, lam: float = DEFAULT_LAMBDA
) -> LossReport:
    """AiF L1 plus ``alpha`` times edge-aware smoothness of the predicted depth."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    l_aif = aif_l1_loss(pred_aif, gt_aif)
    l_smooth = smoothness_loss(pred_depth, gt_aif, lam)
    total = l_aif + alpha * l_smooth
    as_float = lambda v: float(v.data) if isinstance(v, Tensor) else float(v)  # noqa: E731
    return LossReport(
        total=as_float(l_aif) + alpha * as_float(l_smooth),
        aif_l1=as_float(l_aif),
        smooth=as_float(l_smooth),
        tensor=total if isinstance(total, Tensor) else None,
    )


# ---- metrics ---------------------------------------------------------


@dataclass
class MetricReport:
    mae: float
    mse: float
    rmse: float
    log_rms: float
    abs_rel: float
    sqr_rel: float
    bumpiness: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixel_count: int

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} {v}" if isinstance(v, int) else f"{f.name} {v:.10g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        kv = dict(line.split(None, 1) for line in text.strip().splitlines())
        return cls(**{f.name: (int if f.name == "valid_pixel_count" else float)(kv[f.name]) for f in fields(cls)})


def _as_map(x) -> np.ndarray:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"expected an H x W depth map, got shape {a.shape}")
    return a


def hessian_norm(err: np.ndarray) -> np.ndarray:
    """Frobenius norm of the central-difference Hessian at interior pixels, shape (H-2, W-2)."""
    c = err[1:-1, 1:-1]
    dxx = err[1:-1, 2:] - 2 * c + err[1:-1, :-2]
    dyy = err[2:, 1:-1] - 2 * c + err[:-2, 1:-1]
    dxy = (err[2:, 2:] - err[2:, :-2] - err[:-2, 2:] + err[:-2, :-2]) / 4.0
    return np.sqrt(dxx * dxx + dyy * dyy + 2 * dxy * dxy)


def compute_metrics(pred, gt, mask=None) -> MetricReport:
    """Depth error metrics over valid pixels.

    Ratio and log metrics additionally drop pixels with ``gt <= 0`` and clamp
    the prediction to at least 1e-8.  Bumpiness averages over interior pixels
    whose full 3x3 neighbourhood is valid; it is NaN when there are none.
    """
    p, g = _as_map(pred), _as_map(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth shape {g.shape}")
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(p.shape)
    if not m.any():
        raise ValueError("validity mask selects no pixels")
    e = p - g
    ev = e[m]
    mse = float(np.mean(ev * ev))

    pos = m & (g > 0)
    if pos.any():
        gp, pp, ep = g[pos], np.maximum(p[pos], RATIO_FLOOR), e[pos]
        log_rms = math.sqrt(float(np.mean((np.log(pp) - np.log(gp)) ** 2)))
        abs_rel = float(np.mean(np.abs(ep) / gp))
        sqr_rel = float(np.mean(ep * ep / gp))
        ratio = np.maximum(pp / gp, gp / pp)
        deltas = [float(np.mean(ratio < DELTA_BASE**k)) for k in (1, 2, 3)]
    else:
        log_rms = abs_rel = sqr_rel = math.nan
        deltas = [math.nan] * 3

    if min(p.shape) >= 3:
        inner = ndimage.binary_erosion(m, structure=np.ones((3, 3)), border_value=0)[1:-1, 1:-1]
        bump = 100.0 * float(hessian_norm(e)[inner].mean()) if inner.any() else math.nan
    else:
        bump = math.nan

    return MetricReport(
        mae=float(np.mean(np.abs(ev))),
        mse=mse,
        rmse=math.sqrt(mse),
        log_rms=log_rms,
        abs_rel=abs_rel,
        sqr_rel=sqr_rel,
        bumpiness=bump,
        delta1=deltas[0],
        delta2=deltas[1],
        delta3=deltas[2],
        valid_pixel_count=int(m.sum()),
    )


# ---- classical baseline ----------------------------------------------


def modified_laplacian(gray: np.ndarray) -> np.ndarray:
    """``|2v - v_l - v_r| + |2v - v_u - v_d|`` with edge replication."""
    v = np.pad(gray, 1, mode="edge")
    c = v[1:-1, 1:-1]
    return np.abs(2 * c - v[1:-1, :-2] - v[1:-1, 2:]) + np.abs(2 * c - v[:-2, 1:-1] - v[2:, 1:-1])


def focus_measure(image: np.ndarray, window: int = 5) -> np.ndarray:
    """Modified Laplacian of the channel-mean image, box-summed over ``window x window``."""
    gray = np.asarray(image, dtype=np.float64).mean(axis=-1)
    return ndimage.correlate(modified_laplacian(gray), np.ones((window, window)), mode="nearest")


def baseline_argmax_dff(stack: FocalStack, window: int = 5) -> np.ndarray:
    """Per-pixel focus position of the sharpest slice (lowest index on ties), ``H x W x 1``."""
    if stack.frames < 2:
        raise ValueError("need at least two slices")
    sharp = np.stack([focus_measure(stack.slice(t), window) for t in range(stack.frames)], axis=-1)
    best = np.argmax(sharp, axis=-1)
    return stack.axis.positions[best][..., None]
