"""Training losses with analytic gradients.

Each loss returns ``(value, gradient)`` with the gradient taken with respect
to the prediction argument only. Everything is computed in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit, log_softmax

from .encoder import RelationRecord, TargetBundle

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 3.0
    lambda2: float = 1.0
    lambda3: float = 20.0
    lambda4: float = 5.0
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if min(self.__dict__.values()) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossReport:
    l_ent: float
    l_rel: float
    l_mask: float
    l_disp: float
    l_part: float
    l_human: float
    total: float

    @classmethod
    def combine(cls, l_ent, l_rel, l_mask, l_disp, l_part, l_human,
                weights: LossWeights = LossWeights()) -> "LossReport":
        total = (l_ent + l_rel + weights.lambda1 * l_mask + weights.lambda2 * l_disp
                 + weights.lambda3 * l_part + weights.lambda4 * l_human)
        return cls(l_ent, l_rel, l_mask, l_disp, l_part, l_human, float(total))


def _check_same(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def focal_heatmap_loss(pred, target, alpha: float = 2.0, beta: float = 4.0,
                       n_pos: int | None = None) -> tuple[float, np.ndarray]:
    """Penalty-reduced pixel focal loss on a center heatmap.

    Pixels whose target is exactly 1 are positives; the rest are negatives
    down-weighted by ``(1 - target) ** beta``. Predictions are clamped to
    ``[EPS, 1 - EPS]`` and the clamp's gradient is zero outside that range.
    ``n_pos`` defaults to the number of positives; 0 is treated as 1.
    """
    y_raw = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_same(y_raw, t)
    y = np.clip(y_raw, EPS, 1 - EPS)
    pos = t == 1.0
    if n_pos is None:
        n_pos = int(pos.sum())
    norm = max(n_pos, 1)

    neg_w = (1 - t) ** beta
    log_y, log_1my = np.log(y), np.log1p(-y)
    loss_map = np.where(pos, (1 - y) ** alpha * log_y, neg_w * y ** alpha * log_1my)
    grad_pos = -alpha * (1 - y) ** (alpha - 1) * log_y + (1 - y) ** alpha / y
    grad_neg = neg_w * (alpha * y ** (alpha - 1) * log_1my - y ** alpha / (1 - y))
    grad = -np.where(pos, grad_pos, grad_neg) / norm
    grad[(y_raw < EPS) | (y_raw > 1 - EPS)] = 0.0
    return float(-loss_map.sum() / norm), grad


def dice_loss(pred, target) -> tuple[float, np.ndarray]:
    m = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_same(m, t)
    inter = np.sum(m * t)
    union = np.sum(m * m) + np.sum(t * t)
    if union == 0:
        raise ValueError("dice loss undefined when both masks are empty")
    grad = -2 * (t * union - 2 * inter * m) / union ** 2
    return float(1 - 2 * inter / union), grad


def mask_loss(predicted: Mapping[tuple[int, int], np.ndarray],
              bundle: TargetBundle) -> tuple[float, dict]:
    """Mean dice over the positive grid cells of ``bundle``; 0 when there are none."""
    if not bundle.grid_masks:
        return 0.0, {}
    total, grads = 0.0, {}
    n = len(bundle.grid_masks)
    for cell, (_, gt) in bundle.grid_masks.items():
        if cell not in predicted:
            raise KeyError(f"no predicted mask for positive cell {cell}")
        value, g = dice_loss(predicted[cell], gt.to_bitmap())
        total += value
        grads[cell] = g / n
    return total / n, grads


def _record_points(records: Iterable[RelationRecord], shape) -> list[tuple[int, int]]:
    H, W = shape[:2]
    pts = []
    for r in records:
        x, y = r.point
        if not (0 <= x < W and 0 <= y < H):
            raise IndexError(f"relation point {r.point} outside {W}x{H} map")
        pts.append((x, y))
    return pts


def displacement_loss(d_s, d_o, records: list[RelationRecord]):
    """L1 displacement error at each relation point, averaged over records.

    Returns ``(loss, (grad_d_s, grad_d_o))``; the subgradient of ``|0|`` is 0.
    """
    d_s = np.asarray(d_s, dtype=np.float64)
    d_o = np.asarray(d_o, dtype=np.float64)
    _check_same(d_s, d_o)
    pts = _record_points(records, d_s.shape)
    g_s, g_o = np.zeros_like(d_s), np.zeros_like(d_o)
    norm = max(len(records), 1)
    total = 0.0
    for (x, y), r in zip(pts, records):
        es = d_s[y, x] - np.asarray(r.d_s)
        eo = d_o[y, x] - np.asarray(r.d_o)
        total += np.abs(es).sum() + np.abs(eo).sum()
        g_s[y, x] += np.sign(es) / norm
        g_o[y, x] += np.sign(eo) / norm
    return float(total / norm), (g_s, g_o)


def part_bce_loss(logits, records: list[RelationRecord]) -> tuple[float, np.ndarray]:
    """Multi-label BCE on part logits read at each relation point.

    Averaged over the part classes, then over records.
    """
    z_map = np.asarray(logits, dtype=np.float64)
    pts = _record_points(records, z_map.shape)
    n_parts = z_map.shape[-1]
    grad = np.zeros_like(z_map)
    norm = max(len(records), 1)
    total = 0.0
    for (x, y), r in zip(pts, records):
        z = z_map[y, x]
        t = r.parts_multihot(n_parts).astype(np.float64)
        # log(1 + e^z) - t z, written to avoid overflow
        total += np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z))))
        grad[y, x] += (expit(z) - t) / (n_parts * norm)
    return float(total / norm), grad


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1 - gt_sorted)
    jaccard = 1 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def _flat_logits_labels(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    lab = np.asarray(labels)
    if z.shape[:-1] != lab.shape:
        raise ValueError(f"logits {z.shape} do not match labels {lab.shape}")
    lab = lab.astype(np.int64).ravel()
    if lab.size and (lab.min() < 0 or lab.max() >= z.shape[-1]):
        raise ValueError("label out of range")
    return z.reshape(-1, z.shape[-1]), lab


def _softmax_backward(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return p * (g - np.sum(p * g, axis=1, keepdims=True))


def lovasz_softmax_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Multi-class Lovász-softmax over the classes present in ``labels``."""
    z, lab = _flat_logits_labels(logits, labels)
    p = np.exp(log_softmax(z, axis=1))
    grad_p = np.zeros_like(p)
    present = np.unique(lab)
    total = 0.0
    for c in present:
        fg = (lab == c).astype(np.float64)
        errors = np.abs(fg - p[:, c])
        order = np.argsort(-errors, kind="stable")
        g = lovasz_grad(fg[order])
        total += float(errors[order] @ g)
        # d|fg - p| / dp = -1 on foreground, +1 on background
        grad_p[order, c] += g * np.where(fg[order] > 0, -1.0, 1.0)
    n = max(len(present), 1)
    grad = _softmax_backward(p, grad_p / n)
    return total / n, grad.reshape(np.shape(logits))


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    z, lab = _flat_logits_labels(logits, labels)
    logp = log_softmax(z, axis=1)
    n = max(len(lab), 1)
    rows = np.arange(len(lab))
    grad = np.exp(logp)
    grad[rows, lab] -= 1
    return float(-logp[rows, lab].sum() / n), (grad / n).reshape(np.shape(logits))


def parsing_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Pixel-mean cross-entropy plus Lovász-softmax."""
    ce, g_ce = cross_entropy_loss(logits, labels)
    lv, g_lv = lovasz_softmax_loss(logits, labels)
    return ce + lv, g_ce + g_lv


def soft_masks(m_kernel: np.ndarray, m_feat: np.ndarray, cells) -> dict:
    """Sigmoid mask probabilities for each ``(gx, gy)`` grid cell."""
    feat = m_feat.astype(np.float64)
    return {cell: expit(feat @ m_kernel[cell[1], cell[0]].astype(np.float64)) for cell in cells}


def total_loss(outputs, bundle: TargetBundle,
               weights: LossWeights = LossWeights()) -> LossReport:
    """Weighted sum of every branch loss for one sample.

    ``outputs`` is a :class:`hrseg.decoder.PredictionBundle` (or anything with
    the same attributes); its heatmaps are treated as probabilities.
    """
    a, b = weights.alpha, weights.beta
    l_ent, _ = focal_heatmap_loss(outputs.Y, bundle.Y, a, b, n_pos=len(bundle.entity_centers))
    l_rel, _ = focal_heatmap_loss(outputs.P, bundle.P, a, b, n_pos=len(bundle.relation_records))
    masks = soft_masks(outputs.M_kernel, outputs.M_feat, bundle.grid_masks)
    l_mask, _ = mask_loss(masks, bundle)
    l_disp, _ = displacement_loss(outputs.D_s, outputs.D_o, bundle.relation_records)
    l_part, _ = part_bce_loss(outputs.part_logits, bundle.relation_records)
    l_human, _ = parsing_loss(outputs.P_sem, bundle.parsing)
    return LossReport.combine(l_ent, l_rel, l_mask, l_disp, l_part, l_human, weights)


def gradcheck(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], point,
              h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between ``fn``'s gradient and central differences.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps coordinates with a vanishing gradient from dominating.
    """
    x = np.array(point, dtype=np.float64)
    value, analytic = fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise ValueError("non-finite loss or gradient")
    numeric = np.empty_like(x)
    flat, num_flat = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn(x.copy())[0]
        flat[i] = orig - h
        f_minus = fn(x.copy())[0]
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2 * h)
    if not np.all(np.isfinite(numeric)):
        raise ValueError("non-finite finite-difference estimate")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
