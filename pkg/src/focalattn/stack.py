"""Focal stack containers shared by every module."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class FocusAxis:
    """Per-slice focus positions in the linear blur domain.

    Positions are stored once per slice and broadcast over pixels.
    """

    positions: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).reshape(-1)
        if p.size < 2:
            raise ValueError(f"a focus axis needs at least 2 positions, got {p.size}")
        if not np.isfinite(p).all():
            raise ValueError("focus positions must be finite")
        bad = np.nonzero(np.diff(p) <= 0)[0]
        if bad.size:
            i = int(bad[0]) + 1
            raise ValueError(f"focus positions must strictly increase; position {i} ({p[i]}) <= position {i - 1}")
        p.setflags(write=False)
        object.__setattr__(self, "positions", p)

    @classmethod
    def linspace(cls, start: float, stop: float, count: int) -> "FocusAxis":
        return cls(np.linspace(start, stop, count))

    def __len__(self):
        return self.positions.size

    def __eq__(self, other):
        return isinstance(other, FocusAxis) and np.array_equal(self.positions, other.positions)

    def subset(self, index) -> "FocusAxis":
        return FocusAxis(self.positions[index])


@dataclass(eq=False)
class FocalStack:
    """F registered RGB slices, ``slices`` shaped ``H x W x 3 x F``."""

    slices: np.ndarray
    axis: FocusAxis

    def __post_init__(self):
        s = np.asarray(self.slices)
        if s.ndim != 4 or s.shape[2] != 3:
            raise ValueError(f"stack slices must be H x W x 3 x F, got shape {s.shape}")
        if s.shape[3] != len(self.axis):
            raise ValueError(f"stack has {s.shape[3]} slices but the focus axis has {len(self.axis)} positions")
        self.slices = s

    @property
    def height(self) -> int:
        return self.slices.shape[0]

    @property
    def width(self) -> int:
        return self.slices.shape[1]

    @property
    def frames(self) -> int:
        return self.slices.shape[3]

    def slice(self, t: int) -> np.ndarray:
        return self.slices[..., t]

    def subset(self, index) -> "FocalStack":
        index = np.asarray(index)
        return FocalStack(self.slices[..., index], self.axis.subset(index))

    def __eq__(self, other):
        return (
            isinstance(other, FocalStack)
            and self.axis == other.axis
            and np.array_equal(self.slices, other.slices)
        )


@dataclass(eq=False)
class Sample:
    """A focal stack plus whatever ground truth came with it.

    ``gt_depth`` is ``H x W x 1``, ``mask`` is a boolean ``H x W`` validity
    mask (all valid when omitted), ``gt_aif`` is ``H x W x 3``.
    """

    stack: FocalStack
    gt_depth: np.ndarray | None = None
    gt_aif: np.ndarray | None = None
    mask: np.ndarray | None = None
    kappa: float | None = None

    def __post_init__(self):
        hw = self.stack.slices.shape[:2]
        if self.gt_depth is not None:
            d = np.asarray(self.gt_depth)
            if d.ndim == 2:
                d = d[..., None]
            if d.shape != (*hw, 1):
                raise ValueError(f"gt depth shape {d.shape} does not match stack {hw}")
            self.gt_depth = d
        if self.gt_aif is not None and np.shape(self.gt_aif) != (*hw, 3):
            raise ValueError(f"gt aif shape {np.shape(self.gt_aif)} does not match stack {hw}")
        if self.mask is not None and np.shape(self.mask) != hw:
            raise ValueError(f"mask shape {np.shape(self.mask)} does not match stack {hw}")

    def valid_mask(self) -> np.ndarray:
        if self.mask is None:
            return np.ones(self.stack.slices.shape[:2], dtype=bool)
        return np.asarray(self.mask, dtype=bool)
