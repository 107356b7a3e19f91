"""Finite-difference verification of every loss at random non-degenerate points.

Points are redrawn until they sit away from kinks: L1 residuals away from
zero and Lovász error orderings without near-ties.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .encoder import RelationRecord
from .losses import (
    cross_entropy_loss,
    dice_loss,
    displacement_loss,
    focal_heatmap_loss,
    gradcheck,
    lovasz_softmax_loss,
    parsing_loss,
    part_bce_loss,
)

H, W = 4, 4
N_PARTS = 5
N_CLASSES = 4
KINK_MARGIN = 1e-3


def _records(rng, n: int) -> list[RelationRecord]:
    cells = rng.choice(H * W, size=n, replace=False)
    out = []
    for c in cells:
        parts = tuple(sorted(rng.choice(N_PARTS, size=rng.integers(1, 3), replace=False).tolist()))
        out.append(RelationRecord(point=(int(c % W), int(c // W)), relation=0, subject_id=0,
                                  object_id=1, d_s=tuple(rng.integers(-5, 6, 2).astype(float)),
                                  d_o=tuple(rng.integers(-5, 6, 2).astype(float)), parts=parts))
    return out


def focal_case(rng) -> tuple[Callable, np.ndarray]:
    target = rng.uniform(0, 0.95, (H, W))
    target.flat[rng.choice(H * W, size=2, replace=False)] = 1.0
    point = rng.uniform(0.05, 0.95, (H, W))
    return (lambda y: focal_heatmap_loss(y, target)), point


def dice_case(rng):
    target = rng.random((H, W)) < 0.5
    target.flat[rng.integers(H * W)] = True
    point = rng.uniform(0.05, 0.95, (H, W))
    return (lambda m: dice_loss(m, target)), point


def displacement_case(rng):
    records = _records(rng, 3)
    while True:
        point = rng.uniform(-6, 6, (2, H, W, 2))
        residuals = [point[i, y, x] - np.asarray(t) for r in records
                     for i, t in enumerate((r.d_s, r.d_o)) for x, y in [r.point]]
        if np.min(np.abs(residuals)) > KINK_MARGIN:
            break

    def fn(x):
        value, (g_s, g_o) = displacement_loss(x[0], x[1], records)
        return value, np.stack([g_s, g_o])
    return fn, point


def part_bce_case(rng):
    records = _records(rng, 3)
    point = rng.normal(0, 2, (H, W, N_PARTS))
    return (lambda z: part_bce_loss(z, records)), point


def _lovasz_ok(z: np.ndarray, labels: np.ndarray) -> bool:
    flat = z.reshape(-1, N_CLASSES)
    p = np.exp(flat - flat.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    lab = labels.ravel()
    for c in np.unique(lab):
        errors = np.sort(np.abs((lab == c) - p[:, c]))
        if np.min(np.diff(errors)) < KINK_MARGIN:
            return False
    return True


def _parsing_point(rng):
    labels = rng.integers(0, N_CLASSES, (H, W))
    while True:
        point = rng.normal(0, 1.5, (H, W, N_CLASSES))
        if _lovasz_ok(point, labels):
            return labels, point


def parsing_case(rng):
    labels, point = _parsing_point(rng)
    return (lambda z: parsing_loss(z, labels)), point


def lovasz_case(rng):
    labels, point = _parsing_point(rng)
    return (lambda z: lovasz_softmax_loss(z, labels)), point


def cross_entropy_case(rng):
    labels = rng.integers(0, N_CLASSES, (H, W))
    point = rng.normal(0, 1.5, (H, W, N_CLASSES))
    return (lambda z: cross_entropy_loss(z, labels)), point


CASES = {
    "focal": focal_case,
    "dice": dice_case,
    "displacement": displacement_case,
    "part_bce": part_bce_case,
    "lovasz": lovasz_case,
    "cross_entropy": cross_entropy_case,
    "parsing": parsing_case,
}


def run_suite(points: int = 100, seed: int = 0, names=None) -> dict[str, float]:
    """Max relative gradient error per loss over ``points`` random points each."""
    out = {}
    for i, (name, make) in enumerate(CASES.items()):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(points):
            fn, point = make(rng)
            worst = max(worst, gradcheck(fn, point))
        out[name] = worst
    return out
