"""Adam, augmentation and the supervised / unsupervised training loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, backward
from .fusion import expected_depth, fuse_aif, softmax_normalize, softplus_normalize
from .net import Model, forward, infer
from .objectives import (
    DEFAULT_ALPHA,
    DEFAULT_LAMBDA,
    MetricReport,
    aif_l1_loss,
    compute_metrics,
    supervised_loss,
    unsupervised_loss,
)
from .stack import FocalStack, Sample

log = logging.getLogger(__name__)

MODES = ("supervised", "unsupervised")


# ---- Adam ------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimState, params: dict) -> None:
    """One bias-corrected Adam update of ``params`` (name -> Tensor) in place.

    A missing gradient counts as zero.  Any non-finite gradient aborts the
    step before a single parameter or moment is touched.
    """
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}; step rejected")
        grads[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


# ---- augmentation ----------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    crop: int | None = None
    flip_p: float = 0.5
    rotate: bool = True
    jitter: float = 0.1


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    quarter_turns: int = 0
    crop_y: int = 0
    crop_x: int = 0
    crop: int | None = None
    brightness: float = 1.0
    contrast: float = 1.0
    gamma: float = 1.0


def draw_augment(rng: np.random.Generator, height: int, width: int, config: AugmentConfig) -> AugmentParams:
    crop = config.crop
    if crop is not None and (crop > height or crop > width):
        raise ValueError(f"crop {crop} larger than image {height}x{width}")
    hflip = bool(rng.random() < config.flip_p)
    vflip = bool(rng.random() < config.flip_p)
    turns = int(rng.integers(0, 4)) if config.rotate else 0
    if turns % 2 and crop is None and height != width:
        turns = 0
    h, w = (width, height) if turns % 2 else (height, width)
    size_y = h if crop is None else crop
    size_x = w if crop is None else crop
    cy = int(rng.integers(0, h - size_y + 1))
    cx = int(rng.integers(0, w - size_x + 1))
    lo, hi = 1.0 - config.jitter, 1.0 + config.jitter
    b, c, g = rng.uniform(lo, hi, size=3)
    return AugmentParams(hflip, vflip, turns, cy, cx, crop, float(b), float(c), float(g))


def _geometric(a: np.ndarray, prm: AugmentParams) -> np.ndarray:
    if prm.hflip:
        a = a[:, ::-1]
    if prm.vflip:
        a = a[::-1]
    if prm.quarter_turns:
        a = np.rot90(a, prm.quarter_turns, axes=(0, 1))
    if prm.crop is not None:
        a = a[prm.crop_y : prm.crop_y + prm.crop, prm.crop_x : prm.crop_x + prm.crop]
    return np.ascontiguousarray(a)


def _photometric(a: np.ndarray, prm: AugmentParams) -> np.ndarray:
    if prm.brightness == 1.0 and prm.contrast == 1.0 and prm.gamma == 1.0:
        return a
    # contrast pivots on mid-grey so every slice and the AiF image get the same map
    a = np.clip((a * prm.brightness - 0.5) * prm.contrast + 0.5, 0.0, 1.0)
    return np.clip(a**prm.gamma, 0.0, 1.0)


def apply_augment(sample: Sample, prm: AugmentParams) -> Sample:
    slices = _photometric(_geometric(sample.stack.slices, prm), prm)
    return Sample(
        stack=FocalStack(slices, sample.stack.axis),
        gt_depth=None if sample.gt_depth is None else _geometric(sample.gt_depth, prm),
        gt_aif=None if sample.gt_aif is None else _photometric(_geometric(sample.gt_aif, prm), prm),
        mask=None if sample.mask is None else _geometric(sample.mask, prm),
        kappa=sample.kappa,
    )


def augment(sample: Sample, rng: np.random.Generator, config: AugmentConfig) -> Sample:
    """Random flips, quarter turns, crop and brightness/contrast/gamma jitter.

    Geometric changes hit slices, AiF, depth and mask alike; colour changes
    hit slices and AiF alike.  Depth values and focus positions are never
    touched photometrically.
    """
    prm = draw_augment(rng, sample.stack.height, sample.stack.width, config)
    return apply_augment(sample, prm)


# ---- training --------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "supervised"
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    alpha: float = DEFAULT_ALPHA
    lam: float = DEFAULT_LAMBDA
    crop: int | None = 64
    augment: bool = True
    jitter: float = 0.1
    arbitrary_size: bool = False
    f_min: int = 2
    f_max: int = 5
    val_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.f_min < 2 or self.f_max < self.f_min:
            raise ValueError("need 2 <= f_min <= f_max")


def _check_ground_truth(dataset, mode: str):
    if not dataset:
        raise ValueError("empty dataset")
    need = "gt_depth" if mode == "supervised" else "gt_aif"
    for i, s in enumerate(dataset):
        if getattr(s, need) is None:
            raise ValueError(f"{mode} training needs {need}; sample {i} has none")


def _batch(samples: list[Sample]) -> tuple[np.ndarray, FocalStack]:
    axis = samples[0].stack.axis
    if any(s.stack.axis != axis for s in samples[1:]):
        raise ValueError("samples in one batch must share a focus axis")
    return np.stack([s.stack.slices for s in samples]), axis


def compute_loss(model: Model, samples: list[Sample], config: TrainConfig):
    """Forward a batch and return the loss report for the configured mode."""
    slices, axis = _batch(samples)
    scores = forward(model, slices)
    dtype = scores.dtype
    depth = expected_depth(softplus_normalize(scores), axis)
    if config.mode == "supervised":
        gt = np.stack([s.gt_depth for s in samples]).astype(dtype)
        mask = np.stack([s.valid_mask() for s in samples])
        return supervised_loss(depth, gt, mask)
    aif = fuse_aif(softmax_normalize(scores), slices.astype(dtype))
    gt_aif = np.stack([s.gt_aif for s in samples]).astype(dtype)
    return unsupervised_loss(aif, gt_aif, depth, config.alpha, config.lam)


def _effective_crop(config: TrainConfig, model: Model, h: int, w: int) -> int | None:
    if config.crop is None:
        return None
    crop = min(config.crop, h, w)
    return crop - crop % model.config.multiple


@dataclass
class Evaluation:
    metrics: MetricReport
    aif_l1: float | None

    def as_dict(self) -> dict:
        d = dict(vars(self.metrics))
        d["aif_l1"] = self.aif_l1
        return d


def evaluate(model: Model, samples: list[Sample]) -> Evaluation:
    """Field-wise mean of per-sample depth metrics, plus mean AiF L1 where available."""
    reports, aif_errs = [], []
    for s in samples:
        depth, aif = infer(model, s.stack)
        if s.gt_depth is not None:
            reports.append(compute_metrics(depth, s.gt_depth, s.valid_mask()))
        if s.gt_aif is not None:
            aif_errs.append(aif_l1_loss(aif.astype(np.float64), s.gt_aif))
    if reports:
        mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in vars(reports[0])}
        mean["valid_pixel_count"] = int(sum(r.valid_pixel_count for r in reports))
        metrics = MetricReport(**mean)
    else:
        metrics = None
    return Evaluation(metrics, float(np.mean(aif_errs)) if aif_errs else None)


def train(
    model: Model,
    dataset: list[Sample],
    config: TrainConfig,
    val: list[Sample] | None = None,
    state: OptimState | None = None,
) -> tuple[Model, list[dict]]:
    """Train ``model`` in place; returns it with a per-step log.

    Every random draw comes from one generator seeded with ``config.seed``,
    so identical inputs give identical logs.
    """
    _check_ground_truth(dataset, config.mode)
    if config.mode == "unsupervised":
        # the unsupervised objective never sees depth ground truth
        dataset = [replace(s, gt_depth=None, mask=None) for s in dataset]
    rng = np.random.default_rng(config.seed)
    state = state or OptimState(config.lr, config.beta1, config.beta2, config.eps)
    crop = _effective_crop(config, model, dataset[0].stack.height, dataset[0].stack.width)
    if config.augment:
        aug = AugmentConfig(crop=crop, jitter=config.jitter)
    else:
        aug = AugmentConfig(crop=crop, flip_p=0.0, rotate=False, jitter=0.0)
    n = len(dataset)
    history = []
    for step in range(config.steps):
        pick = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
        frames = dataset[pick[0]].stack.frames
        if config.arbitrary_size:
            count = int(rng.integers(config.f_min, min(config.f_max, frames) + 1))
            keep = np.sort(rng.choice(frames, size=count, replace=False))
        else:
            keep = None
        batch = []
        for i in pick:
            s = dataset[i]
            if keep is not None:
                s = replace(s, stack=s.stack.subset(keep))
            batch.append(augment(s, rng, aug))
        report = compute_loss(model, batch, config)
        model.zero_grad()
        backward(report.tensor)
        adam_step(state, model.params)
        entry = {"step": step, "frames": batch[0].stack.frames, **report.as_dict()}
        if val and config.val_every and ((step + 1) % config.val_every == 0 or step + 1 == config.steps):
            entry["val"] = evaluate(model, val).as_dict()
            log.info("step %d loss %.5f val %s", step, report.total, entry["val"])
        history.append(entry)
    return model, history


def test_time_optimize(model: Model, samples: list[Sample], config: TrainConfig) -> Model:
    """Adapt a copy of ``model`` to ``samples`` with the unsupervised objective only.

    Depth ground truth on the samples is ignored.
    """
    for i, s in enumerate(samples):
        if s.gt_aif is None:
            raise ValueError(f"test-time optimization needs an AiF image; sample {i} has none")
    adapted = model.copy()
    if config.steps == 0:
        return adapted
    stripped = [replace(s, gt_depth=None, mask=None) for s in samples]
    train(adapted, stripped, replace(config, mode="unsupervised", val_every=0))
    return adapted
