"""Run-length encoded binary masks.

Runs are row-major and always start with a background run, which may be
zero-length when the first pixel is foreground. Every later run is >= 1, so
each bitmap has exactly one encoding and masks can be compared with ``==``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class Mask:
    width: int
    height: int
    runs: tuple[int, ...]

    def __post_init__(self):
        runs = tuple(int(r) for r in self.runs)
        object.__setattr__(self, "runs", runs)
        if self.width < 1 or self.height < 1:
            raise MaskError(f"mask dims must be positive, got {self.width}x{self.height}")
        if not runs:
            raise MaskError("mask needs at least one run")
        if sum(runs) != self.width * self.height:
            raise MaskError(f"runs sum to {sum(runs)}, expected {self.width * self.height}")
        if runs[0] < 0 or any(r < 1 for r in runs[1:]):
            raise MaskError("only the leading background run may be zero")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def to_bitmap(self) -> np.ndarray:
        return rle_decode(self)

    @classmethod
    def from_bitmap(cls, bitmap: np.ndarray) -> "Mask":
        bitmap = np.asarray(bitmap, dtype=bool)
        if bitmap.ndim != 2:
            raise MaskError(f"expected a 2-D bitmap, got shape {bitmap.shape}")
        h, w = bitmap.shape
        return rle_encode(bitmap.ravel(), w, h)

    @property
    def empty(self) -> bool:
        return len(self.runs) == 1


def rle_encode(bitmap: Sequence[bool] | np.ndarray, width: int, height: int) -> Mask:
    flat = np.asarray(bitmap, dtype=bool).ravel()
    if flat.size != width * height:
        raise MaskError(f"bitmap has {flat.size} pixels, expected {width}x{height}")
    # positions where the value changes, bracketed by both ends
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return Mask(width, height, tuple(runs))


def rle_decode(mask: Mask) -> np.ndarray:
    """Expand to an ``(height, width)`` boolean array."""
    values = np.zeros(len(mask.runs), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, mask.runs)
    return flat.reshape(mask.height, mask.width)


def _check_dims(a: Mask, b: Mask):
    if (a.width, a.height) != (b.width, b.height):
        raise MaskError(f"mask dims differ: {a.width}x{a.height} vs {b.width}x{b.height}")


def mask_iou(a: Mask, b: Mask) -> float:
    _check_dims(a, b)
    ba, bb = a.to_bitmap(), b.to_bitmap()
    union = np.count_nonzero(ba | bb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ba & bb) / union


def mask_area(m: Mask) -> int:
    return int(sum(m.runs[1::2]))


def _foreground(m: Mask) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.nonzero(m.to_bitmap())
    if xs.size == 0:
        raise MaskError("mask is empty")
    return xs, ys


def mass_center(m: Mask) -> tuple[float, float]:
    """Mean foreground pixel coordinate ``(x, y)``; pixel (x, y) sits at (x, y)."""
    xs, ys = _foreground(m)
    return float(xs.mean()), float(ys.mean())


def tight_bbox(m: Mask) -> tuple[int, int, int, int]:
    """Inclusive ``(x0, y0, x1, y1)`` box around the foreground."""
    xs, ys = _foreground(m)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def upsample_mask(m: Mask, stride: int, width: int, height: int) -> Mask:
    """Nearest-neighbour upsample by ``stride``, then crop or zero-pad to ``width`` x ``height``."""
    big = np.repeat(np.repeat(m.to_bitmap(), stride, axis=0), stride, axis=1)
    out = np.zeros((height, width), dtype=bool)
    h, w = min(height, big.shape[0]), min(width, big.shape[1])
    out[:h, :w] = big[:h, :w]
    return Mask.from_bitmap(out)
