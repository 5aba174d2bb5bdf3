"""Layered circle-of-confusion renderer for synthetic focal stacks.

Depth lives in the same linear blur domain as the focus positions, so the
blur radius of a point is just ``kappa * |depth - focus|`` pixels.  Larger
depth values are treated as farther from the camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .stack import FocalStack, FocusAxis, Sample

COVERAGE_EPS = 1e-6


@dataclass
class Scene:
    aif: np.ndarray
    depth: np.ndarray
    kappa: float = 2.0
    layers: int = 16

    def __post_init__(self):
        self.aif = np.asarray(self.aif, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        if depth.ndim == 3 and depth.shape[-1] == 1:
            depth = depth[..., 0]
        self.depth = depth
        if self.aif.ndim != 3 or self.aif.shape[-1] != 3:
            raise ValueError(f"scene aif must be H x W x 3, got shape {self.aif.shape}")
        if self.aif.shape[:2] != depth.shape:
            raise ValueError(f"aif shape {self.aif.shape} and depth shape {depth.shape} disagree")
        if not np.isfinite(depth).all():
            raise ValueError("scene depth must be finite")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.layers < 1:
            raise ValueError("layers must be at least 1")


@dataclass(frozen=True)
class BlurKernel:
    radius: float
    taps: np.ndarray


def coc_radius(depth_value, focus_position, kappa: float):
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return kappa * np.abs(np.asarray(depth_value) - focus_position)


def disc_kernel(radius: float) -> BlurKernel:
    """Binary disc of pixel centres within ``radius``, normalized to sum 1."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    half = math.ceil(radius)
    yy, xx = np.mgrid[-half : half + 1, -half : half + 1]
    taps = (xx * xx + yy * yy <= radius * radius).astype(np.float64)
    taps /= taps.sum()
    return BlurKernel(float(radius), taps)


def _blur(img: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    if kernel.taps.size == 1:
        return img.copy()
    k = kernel.taps[..., None] if img.ndim == 3 else kernel.taps
    return ndimage.correlate(img, k, mode="constant", cval=0.0)


def depth_layers(depth: np.ndarray, layers: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width binning of ``depth`` into ``layers`` bins; returns (bin index, bin centres)."""
    lo, hi = float(depth.min()), float(depth.max())
    if hi == lo:
        return np.zeros(depth.shape, dtype=np.int64), np.full(layers, lo)
    width = (hi - lo) / layers
    idx = np.clip(np.floor((depth - lo) / width).astype(np.int64), 0, layers - 1)
    centres = lo + (np.arange(layers) + 0.5) * width
    return idx, centres


def render_slice(scene: Scene, focus_position: float) -> np.ndarray:
    """Render one defocused H x W x 3 image focused at ``focus_position``.

    Layers are composited back to front with premultiplied colour and a
    coverage channel, each blurred by the disc of its bin-centre CoC.
    """
    if scene.depth.size == 0:
        raise ValueError("cannot render an empty scene")
    if not math.isfinite(focus_position):
        raise ValueError("focus position must be finite")
    idx, centres = depth_layers(scene.depth, scene.layers)
    color = np.zeros_like(scene.aif)
    cover = np.zeros(scene.depth.shape)
    for layer in range(scene.layers - 1, -1, -1):
        mask = idx == layer
        if not mask.any():
            continue
        kernel = disc_kernel(float(coc_radius(centres[layer], focus_position, scene.kappa)))
        alpha = _blur(mask.astype(np.float64), kernel)
        premult = _blur(scene.aif * mask[..., None], kernel)
        color = premult + (1.0 - alpha)[..., None] * color
        cover = alpha + (1.0 - alpha) * cover
    return color / np.maximum(cover, COVERAGE_EPS)[..., None]


def synth_stack(scene: Scene, axis: FocusAxis) -> Sample:
    """Render every slice of ``axis``; the scene's aif and depth ride along as ground truth."""
    if not isinstance(axis, FocusAxis):
        axis = FocusAxis(axis)
    slices = np.stack([render_slice(scene, float(p)) for p in axis.positions], axis=-1)
    return Sample(
        stack=FocalStack(slices, axis),
        gt_depth=scene.depth[..., None],
        gt_aif=scene.aif,
        kappa=scene.kappa,
    )
