"""Relation segmentation metrics: mean Recall@K, AR, category splits and AP_role."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import CategorySchema, Mask, SceneAnnotation, mask_iou
from .decoder import RelationTriplet

log = logging.getLogger(__name__)

RS, HRS = "RS", "HRS"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    k_values: tuple[int, ...] = (25, 50, 100)
    iou_thresholds: tuple[float, ...] = (0.25, 0.5, 0.75)
    mode: str = RS
    rare_threshold: int = 800

    def __post_init__(self):
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))
        object.__setattr__(self, "mode", self.mode.upper())
        if not self.k_values or list(self.k_values) != sorted(set(self.k_values)):
            raise ValueError("k_values must be strictly ascending")
        if self.k_values[0] < 1:
            raise ValueError("k_values must be >= 1")
        if not self.iou_thresholds or any(not 0 < t <= 1 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        if self.mode not in (RS, HRS):
            raise ValueError(f"mode must be {RS} or {HRS}")


@dataclass(frozen=True)
class GroundTruthTriplet:
    relation: int
    subject_category: int
    object_category: int
    subject_mask: Mask
    object_mask: Mask
    parts: tuple[int, ...] = ()


def gt_triplets(scene: SceneAnnotation) -> list[GroundTruthTriplet]:
    out = []
    for r in scene.relations:
        s, o = scene.entity(r.subject_id), scene.entity(r.object_id)
        out.append(GroundTruthTriplet(r.relation, s.category, o.category, s.mask, o.mask,
                                      tuple(r.parts)))
    return out


def _categories_match(pred: RelationTriplet, gt: GroundTruthTriplet) -> bool:
    return (pred.relation == gt.relation and pred.subject.category == gt.subject_category
            and pred.object.category == gt.object_category)


def is_tp(pred: RelationTriplet, gt: GroundTruthTriplet, tau: float, mode: str = RS) -> bool:
    """TP test: all three categories agree and both masks exceed IoU ``tau``.

    In HRS mode the predicted part set must also equal the ground-truth set
    (both are empty for geometric relations).
    """
    if not _categories_match(pred, gt):
        return False
    if mode.upper() == HRS and set(pred.parts) != set(gt.parts):
        return False
    return mask_iou(pred.subject.mask, gt.subject_mask) > tau and \
        mask_iou(pred.object.mask, gt.object_mask) > tau


# -- matching ------------------------------------------------------------------

@dataclass
class _ImagePairs:
    """Per-image IoU tables between the top-K predictions and the ground truth."""

    preds: list[RelationTriplet]
    gts: list[GroundTruthTriplet]
    compatible: np.ndarray  # preds x gts, categories (and parts) agree
    iou: np.ndarray         # preds x gts, min(subject IoU, object IoU)


def _pair_tables(preds, gts, mode) -> _ImagePairs:
    comp = np.zeros((len(preds), len(gts)), dtype=bool)
    iou = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if not _categories_match(p, g):
                continue
            if mode == HRS and set(p.parts) != set(g.parts):
                continue
            comp[i, j] = True
            iou[i, j] = min(mask_iou(p.subject.mask, g.subject_mask),
                            mask_iou(p.object.mask, g.object_mask))
    return _ImagePairs(list(preds), list(gts), comp, iou)


def _max_matching(edges: list[list[int]], n_gt: int) -> tuple[dict[int, int], int]:
    """Maximum bipartite matching, seeded in prediction order.

    ``edges[i]`` lists the GT indices prediction ``i`` may claim, best first.
    Predictions are processed in score order; a later prediction may displace
    an earlier one only along an augmenting path, so the result has maximum
    cardinality. Returns ``(gt -> pred, number of re-assignments)``.
    """
    owner: dict[int, int] = {}
    rematches = 0

    def try_claim(i: int, seen: set) -> bool:
        nonlocal rematches
        for j in edges[i]:
            if j not in owner and j not in seen:
                seen.add(j)
                owner[j] = i
                return True
        for j in edges[i]:
            if j in seen:
                continue
            seen.add(j)
            if try_claim(owner[j], seen):
                owner[j] = i
                rematches += 1
                return True
        return False

    for i in range(len(edges)):
        if edges[i]:
            try_claim(i, set())
    return owner, rematches


def _match_image(pairs: _ImagePairs, k: int, tau: float):
    n = min(k, len(pairs.preds))
    edges = []
    for i in range(n):
        js = np.flatnonzero(pairs.compatible[i] & (pairs.iou[i] > tau))
        # best IoU first, then GT order
        edges.append(sorted(js.tolist(), key=lambda j: (-pairs.iou[i, j], j)))
    return _max_matching(edges, len(pairs.gts))


@dataclass
class EvalReport:
    mode: str
    k_values: tuple[int, ...]
    iou_thresholds: tuple[float, ...]
    categories: list[int]
    gt_counts: dict[int, int]
    # recall[K][tau][category]
    recall: dict[int, dict[float, dict[int, float]]]
    mean_recall: dict[int, float]
    ar: float
    diagnostics: dict = field(default_factory=dict)

    def category_recall(self, k: int) -> dict[int, float]:
        """Per-category recall at ``k`` averaged over IoU thresholds."""
        return {c: float(np.mean([self.recall[k][t][c] for t in self.iou_thresholds]))
                for c in self.categories}

    def to_dict(self, schema: CategorySchema | None = None) -> dict:
        def name(c):
            return schema.relation_names[c] if schema else str(c)
        return {
            "mode": self.mode,
            "k_values": list(self.k_values),
            "iou_thresholds": list(self.iou_thresholds),
            "mR": {str(k): v for k, v in self.mean_recall.items()},
            "AR": self.ar,
            "gt_counts": {name(c): n for c, n in self.gt_counts.items()},
            "per_category_recall": {
                str(k): {str(t): {name(c): r for c, r in by_c.items()}
                         for t, by_c in by_t.items()}
                for k, by_t in self.recall.items()
            },
            "diagnostics": self.diagnostics,
        }

    def table(self) -> str:
        cols = [f"mR@{k}" for k in self.k_values] + ["AR"]
        vals = [self.mean_recall[k] for k in self.k_values] + [self.ar]
        head = f"{self.mode:<4} | " + " | ".join(f"{c:>8}" for c in cols)
        row = "     | " + " | ".join(f"{100 * v:8.2f}" for v in vals)
        return f"{head}\n{'-' * len(head)}\n{row}"


def _ranked(preds: Sequence[RelationTriplet]) -> list[RelationTriplet]:
    return sorted(preds, key=RelationTriplet.sort_key)


def evaluate(preds_per_image: Sequence[Sequence[RelationTriplet]],
             gts_per_image: Sequence[Sequence[GroundTruthTriplet]],
             cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Mean Recall@K for every K and IoU threshold in ``cfg``.

    Each image contributes its K most confident predictions. Every ground
    truth triplet is claimed by at most one prediction, with the number of
    claims maximised per image.
    """
    if len(preds_per_image) != len(gts_per_image):
        raise EvaluationError("predictions and ground truth cover different image counts")
    gt_counts: dict[int, int] = {}
    for gts in gts_per_image:
        for g in gts:
            gt_counts[g.relation] = gt_counts.get(g.relation, 0) + 1
    if not gt_counts:
        raise EvaluationError("no ground-truth relations; mean recall is undefined")
    categories = sorted(gt_counts)
    kmax = max(cfg.k_values)

    tables = [_pair_tables(_ranked(p)[:kmax], list(g), cfg.mode)
              for p, g in zip(preds_per_image, gts_per_image)]

    recall: dict = {}
    matches = []
    ambiguous = sum(int(np.sum(t.compatible.sum(axis=1) > 1)) for t in tables)
    rematches = 0
    for k in cfg.k_values:
        recall[k] = {}
        for tau in cfg.iou_thresholds:
            tp = dict.fromkeys(categories, 0)
            for img, t in enumerate(tables):
                owner, n_re = _match_image(t, k, tau)
                rematches += n_re
                for j, i in owner.items():
                    tp[t.gts[j].relation] += 1
                    if k == kmax:
                        matches.append([img, tau, i, j])
            recall[k][tau] = {c: tp[c] / gt_counts[c] for c in categories}
    mean_recall = {
        k: float(np.mean([np.mean(list(recall[k][t].values())) for t in cfg.iou_thresholds]))
        for k in cfg.k_values
    }
    ar = float(np.mean(list(mean_recall.values())))
    diagnostics = {"ambiguous_predictions": ambiguous, "augmenting_rematches": rematches,
                   "matches_at_max_k": matches}
    return EvalReport(cfg.mode, cfg.k_values, cfg.iou_thresholds, categories, gt_counts,
                      recall, mean_recall, ar, diagnostics)


def mean_recall_at_k(preds_per_image, gts_per_image, k: int,
                     cfg: EvalConfig = EvalConfig()) -> float:
    sub = EvalConfig((k,), cfg.iou_thresholds, cfg.mode, cfg.rare_threshold)
    return evaluate(preds_per_image, gts_per_image, sub).mean_recall[k]


# -- splits ----------------------------------------------------------------------

def _split_means(per_cat: dict[int, float], groups: dict[str, list[int]]) -> dict[str, float]:
    out = {}
    for name, members in groups.items():
        vals = [per_cat[c] for c in members if c in per_cat]
        if not vals:
            log.warning("split %r has no evaluated categories; omitted", name)
            continue
        out[name] = float(np.mean(vals))
    if out:
        out["mean"] = float(np.mean(list(out.values())))
    return out


def split_report(report: EvalReport, schema: CategorySchema,
                 train_counts: Mapping[int, int] | None = None,
                 rare_threshold: int = 800) -> dict:
    """Geometric/action and rare/non-rare means of per-category recall.

    Values are given per K and for AR (mean over K). ``mean`` is the plain
    average of the split values that are present. Relations seen fewer than
    ``rare_threshold`` times in ``train_counts`` are rare.
    """
    geo_act = {
        "geometric": [c for c in report.categories if not schema.is_action(c)],
        "action": [c for c in report.categories if schema.is_action(c)],
    }
    per_k = {k: report.category_recall(k) for k in report.k_values}
    per_k["AR"] = {c: float(np.mean([per_k[k][c] for k in report.k_values]))
                   for c in report.categories}
    out = {"geo_act": {str(k): _split_means(v, geo_act) for k, v in per_k.items()}}
    if train_counts is not None:
        rare = {
            "rare": [c for c in report.categories if train_counts.get(c, 0) < rare_threshold],
            "non_rare": [c for c in report.categories
                         if train_counts.get(c, 0) >= rare_threshold],
        }
        out["rare"] = {str(k): _split_means(v, rare) for k, v in per_k.items()}
    return out


# -- AP_role ---------------------------------------------------------------------

def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        raise EvaluationError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    rec = ctp / n_gt
    prec = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_role(preds_per_image: Sequence[Sequence[RelationTriplet]],
            gts_per_image: Sequence[Sequence[GroundTruthTriplet]],
            iou_threshold: float = 0.5, relations: Sequence[int] | None = None) -> float:
    """Mean over relation categories of role AP at mask IoU ``iou_threshold``.

    A prediction counts when its relation matches and both subject and object
    masks exceed the threshold against an unclaimed ground truth; each
    prediction claims the best-overlapping one. Categories without ground
    truth are excluded.
    """
    if len(preds_per_image) != len(gts_per_image):
        raise EvaluationError("predictions and ground truth cover different image counts")
    present = sorted({g.relation for gts in gts_per_image for g in gts})
    if relations is not None:
        present = [c for c in present if c in set(relations)]
    if not present:
        raise EvaluationError("no ground-truth relations for AP_role")
    aps = []
    for c in present:
        ranked = sorted(((p, img) for img, ps in enumerate(preds_per_image)
                         for p in ps if p.relation == c),
                        key=lambda pi: (pi[0].sort_key(), pi[1]))
        gts = {img: [g for g in gs if g.relation == c] for img, gs in enumerate(gts_per_image)}
        n_gt = sum(len(v) for v in gts.values())
        claimed = {img: [False] * len(v) for img, v in gts.items()}
        flags = []
        for p, img in ranked:
            best, best_iou = None, iou_threshold
            for j, g in enumerate(gts[img]):
                if claimed[img][j]:
                    continue
                iou_s = mask_iou(p.subject.mask, g.subject_mask)
                iou_o = mask_iou(p.object.mask, g.object_mask)
                if iou_s > iou_threshold and iou_o > iou_threshold:
                    v = min(iou_s, iou_o)
                    if best is None or v > best_iou:
                        best, best_iou = j, v
            if best is not None:
                claimed[img][best] = True
            flags.append(best is not None)
        aps.append(average_precision(flags, n_gt))
    return float(np.mean(aps))
