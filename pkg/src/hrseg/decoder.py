"""Inference-time decoding of branch outputs into scored relation triplets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .core import CategorySchema, Mask
from .encoder import grid_cell

log = logging.getLogger(__name__)

DISPLACEMENT_MODES = ("both", "subject_only")


class DecodeError(ValueError):
    pass


@dataclass
class PredictionBundle:
    Y: np.ndarray           # H x W x C_ent center heatmap
    P: np.ndarray           # H x W x C_rel relation-point heatmap
    D_s: np.ndarray         # H x W x 2
    D_o: np.ndarray         # H x W x 2
    part_logits: np.ndarray  # H x W x C_part
    M_kernel: np.ndarray    # S x S x D
    M_feat: np.ndarray      # H x W x D
    P_sem: np.ndarray       # H x W x (C_part + 1)

    TENSOR_FILES = {
        "Y": "y.hrst", "P": "p.hrst", "D_s": "ds.hrst", "D_o": "do.hrst",
        "part_logits": "parts.hrst", "M_kernel": "mkernel.hrst",
        "M_feat": "mfeat.hrst", "P_sem": "psem.hrst",
    }

    def validate(self) -> None:
        H, W = self.Y.shape[:2]
        for name in ("P", "D_s", "D_o", "part_logits", "M_feat", "P_sem"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (H, W):
                raise DecodeError(f"{name} has shape {arr.shape}, expected {H}x{W}x*")
        if self.D_s.shape[2] != 2 or self.D_o.shape[2] != 2:
            raise DecodeError("displacement maps need exactly 2 channels")
        k = self.M_kernel
        if k.ndim != 3 or k.shape[0] != k.shape[1]:
            raise DecodeError(f"M_kernel must be S x S x D, got {k.shape}")
        if k.shape[2] != self.M_feat.shape[2]:
            raise DecodeError("M_kernel and M_feat disagree on D")
        if self.P_sem.shape[2] != self.part_logits.shape[2] + 1:
            raise DecodeError("P_sem needs C_part + 1 channels")
        for name in self.TENSOR_FILES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise DecodeError(f"{name} contains non-finite values")

    @property
    def grid_size(self) -> int:
        return self.M_kernel.shape[0]


@dataclass(frozen=True)
class DecodeConfig:
    k_s: int = 25
    k_o: int = 10
    k_r: int = 30
    peak_window: int = 3
    mask_threshold: float = 0.5
    part_threshold: float = 0.5
    subject_must_be_human: bool = True
    displacement_mode: str = "both"

    def __post_init__(self):
        if min(self.k_s, self.k_o, self.k_r) < 1:
            raise ValueError("k_s, k_o and k_r must be >= 1")
        if self.peak_window < 1 or self.peak_window % 2 == 0:
            raise ValueError("peak_window must be a positive odd integer")
        for t in (self.mask_threshold, self.part_threshold):
            if not 0 < t < 1:
                raise ValueError("thresholds must lie in (0, 1)")
        if self.displacement_mode not in DISPLACEMENT_MODES:
            raise ValueError(f"displacement_mode must be one of {DISPLACEMENT_MODES}")


class Peak(NamedTuple):
    x: int
    y: int
    c: int
    score: float


@dataclass(frozen=True)
class EntityPrediction:
    category: int
    center: tuple[int, int]
    mask: Mask
    score: float


@dataclass(frozen=True)
class RelationTriplet:
    relation: int
    score: float
    subject: EntityPrediction
    object: EntityPrediction
    relation_point: tuple[int, int] = (0, 0)
    relation_score: float = 1.0
    parts: tuple[int, ...] = ()
    # part index -> mask; None when the parsing map had no pixels for it
    part_masks: dict = field(default_factory=dict, compare=False)

    def sort_key(self):
        """Score-descending order with a content-based tie break."""
        return (-self.score, self.relation, self.subject.category, self.object.category,
                self.subject.center, self.object.center, self.parts,
                self.subject.mask.runs, self.object.mask.runs)


@dataclass
class DecodeReport:
    relation_peaks: int = 0
    no_subject: int = 0
    no_object: int = 0
    empty_subject_mask: int = 0
    empty_object_mask: int = 0
    classification_only_parts: int = 0
    shared_relation_pixels: int = 0

    def counters(self) -> dict[str, int]:
        return dict(self.__dict__)


def _local_max_mask(h: np.ndarray, window: int) -> np.ndarray:
    """Dense window-max suppression on an (H, W, C) array, per channel.

    A pixel survives when it is >= every neighbour and strictly greater than
    every neighbour that precedes it in row-major order, so a plateau keeps
    only its first pixel. Out-of-image neighbours never suppress.
    """
    r = window // 2
    H, W = h.shape[:2]
    padded = np.pad(h, ((r, r), (r, r), (0, 0)), constant_values=-np.inf)
    keep = np.ones(h.shape, dtype=bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[r + dy:r + dy + H, r + dx:r + dx + W]
            keep &= (h > nb) if (dy, dx) < (0, 0) else (h >= nb)
    return keep


def _is_local_max(h: np.ndarray, ys, xs, cs, window: int) -> np.ndarray:
    """The same rule as :func:`_local_max_mask`, evaluated only at the given pixels."""
    r = window // 2
    H, W = h.shape[:2]
    vals = h[ys, xs, cs]
    keep = np.ones(ys.size, dtype=bool)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            yy, xx = ys + dy, xs + dx
            inside = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            nb = h[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1), cs]
            ok = (vals > nb) if (dy, dx) < (0, 0) else (vals >= nb)
            keep &= ok | ~inside
    return keep


def topk_peaks(heatmap: np.ndarray, k: int, window: int = 3) -> list[Peak]:
    """Top-``k`` strictly positive local maxima, score-descending.

    Equal scores are ordered by ``(c, y, x)``. Only the highest pixels are
    tested: the candidate pool grows until every untested pixel scores
    strictly below the k-th peak found, so the result equals a dense scan.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    h = np.asarray(heatmap)
    if h.ndim == 2:
        h = h[:, :, None]
    H, W, C = h.shape
    flat = h.reshape(-1)
    n = flat.size
    pool = min(n, max(64 * k, 1024))
    while True:
        if pool < n:
            part = np.argpartition(flat, (n - pool - 1, n - pool))
            idx, untested_max = part[n - pool:], flat[part[n - pool - 1]]
        else:
            idx, untested_max = np.arange(n), -np.inf
        idx = idx[flat[idx] > 0]
        ys, rem = np.divmod(idx, W * C)
        xs, cs = np.divmod(rem, C)
        keep = _is_local_max(h, ys, xs, cs, window)
        ys, xs, cs = ys[keep], xs[keep], cs[keep]
        scores = h[ys, xs, cs]
        order = np.lexsort((xs, ys, cs, -scores.astype(np.float64)))[:k]
        if pool == n or (order.size == k and scores[order[-1]] > untested_max):
            return [Peak(int(xs[i]), int(ys[i]), int(cs[i]), float(scores[i])) for i in order]
        pool = min(n, pool * 4)


# relative slack when comparing selection costs
COST_RTOL = 1e-9


def select_entity(point: tuple[float, float], displacement, candidates: list[Peak],
                  restrict_category: int | None = None) -> Peak | None:
    """Pick the candidate minimising L1 distance to ``point + displacement`` over score.

    Costs within a relative ``COST_RTOL`` of the minimum count as tied, so a
    uniform rescaling of the scores cannot flip a tie through rounding. Ties
    go to the higher score, then to the smaller ``(c, y, x)``. Returns None
    when no candidate survives the category restriction.
    """
    tx = point[0] + float(displacement[0])
    ty = point[1] + float(displacement[1])
    pool = [p for p in candidates
            if p.score > 0 and (restrict_category is None or p.c == restrict_category)]
    if not pool:
        return None
    costs = [(abs(p.x - tx) + abs(p.y - ty)) / p.score for p in pool]
    limit = min(costs) * (1 + COST_RTOL)
    tied = [p for p, cost in zip(pool, costs) if cost <= limit]
    return min(tied, key=lambda p: (-p.score, p.c, p.y, p.x))


def generate_mask(m_kernel: np.ndarray, m_feat: np.ndarray, center: tuple[int, int],
                  threshold: float = 0.5) -> Mask | None:
    """Apply the grid cell's 1x1 kernel to the mask feature; None if nothing survives.

    The threshold is exclusive: a pixel needs sigmoid(logit) > threshold.
    """
    H, W = m_feat.shape[:2]
    x, y = center
    if not (0 <= x < W and 0 <= y < H):
        raise DecodeError(f"center {center} outside {W}x{H} feature map")
    gx, gy = grid_cell(center, m_kernel.shape[0], W, H)
    logits = m_feat.astype(np.float64) @ m_kernel[gy, gx].astype(np.float64)
    bitmap = expit(logits) > threshold
    if not bitmap.any():
        return None
    return Mask.from_bitmap(bitmap)


def decode(bundle: PredictionBundle, cfg: DecodeConfig = DecodeConfig(),
           schema: CategorySchema | None = None) -> tuple[list[RelationTriplet], DecodeReport]:
    schema = schema or CategorySchema.default()
    bundle.validate()
    report = DecodeReport()
    human = schema.human_category_index

    rel_peaks = topk_peaks(bundle.P, cfg.k_r, cfg.peak_window)
    report.relation_peaks = len(rel_peaks)
    if not rel_peaks:
        return [], report
    pixel_counts: dict[tuple[int, int], int] = {}
    for rp in rel_peaks:
        pixel_counts[(rp.x, rp.y)] = pixel_counts.get((rp.x, rp.y), 0) + 1
    report.shared_relation_pixels = sum(n for n in pixel_counts.values() if n > 1)

    if cfg.subject_must_be_human:
        subjects = [p._replace(c=human)
                    for p in topk_peaks(bundle.Y[:, :, human:human + 1], cfg.k_s, cfg.peak_window)]
    else:
        subjects = topk_peaks(bundle.Y, cfg.k_s, cfg.peak_window)
    objects = topk_peaks(bundle.Y, cfg.k_o, cfg.peak_window)

    mask_cache: dict[tuple[int, int], Mask | None] = {}

    def mask_at(pk: Peak) -> Mask | None:
        key = (pk.x, pk.y)
        if key not in mask_cache:
            mask_cache[key] = generate_mask(bundle.M_kernel, bundle.M_feat, key,
                                            cfg.mask_threshold)
        return mask_cache[key]

    labels = None
    triplets = []
    for rp in rel_peaks:
        d_s = bundle.D_s[rp.y, rp.x]
        d_o = -d_s if cfg.displacement_mode == "subject_only" else bundle.D_o[rp.y, rp.x]
        subj = select_entity((rp.x, rp.y), d_s, subjects,
                             human if cfg.subject_must_be_human else None)
        if subj is None:
            report.no_subject += 1
            continue
        obj = select_entity((rp.x, rp.y), d_o, objects)
        if obj is None:
            report.no_object += 1
            continue
        m_sub, m_obj = mask_at(subj), mask_at(obj)
        if m_sub is None:
            report.empty_subject_mask += 1
            continue
        if m_obj is None:
            report.empty_object_mask += 1
            continue

        parts: tuple[int, ...] = ()
        part_masks = {}
        if schema.is_action(rp.c):
            probs = expit(bundle.part_logits[rp.y, rp.x].astype(np.float64))
            parts = tuple(int(i) for i in np.flatnonzero(probs > cfg.part_threshold))
            if parts:
                if labels is None:
                    labels = np.argmax(bundle.P_sem, axis=2)
                sub_bits = m_sub.to_bitmap()
                for p in parts:
                    bits = sub_bits & (labels == p + 1)
                    if bits.any():
                        part_masks[p] = Mask.from_bitmap(bits)
                    else:
                        part_masks[p] = None
                        report.classification_only_parts += 1

        triplets.append(RelationTriplet(
            relation=rp.c,
            score=subj.score * obj.score * rp.score,
            subject=EntityPrediction(subj.c, (subj.x, subj.y), m_sub, subj.score),
            object=EntityPrediction(obj.c, (obj.x, obj.y), m_obj, obj.score),
            relation_point=(rp.x, rp.y),
            relation_score=rp.score,
            parts=parts,
            part_masks=part_masks,
        ))
    triplets.sort(key=RelationTriplet.sort_key)
    return triplets, report


# -- interacted-part baselines -------------------------------------------------

PART_STRATEGIES = ("most_frequent", "sample_by_distribution", "nearest_part")


@dataclass
class PartStats:
    """Relation x part co-occurrence counts gathered from training annotations."""

    counts: np.ndarray  # C_rel x C_part

    @classmethod
    def from_scenes(cls, scenes, schema: CategorySchema) -> "PartStats":
        counts = np.zeros((schema.n_relations, schema.n_parts), dtype=np.int64)
        for scene in scenes:
            for r in scene.relations:
                for p in r.parts:
                    counts[r.relation, p] += 1
        return cls(counts)

    def distribution(self, relation: int) -> np.ndarray:
        n_parts = self.counts.shape[1]
        if not 0 <= relation < self.counts.shape[0] or self.counts[relation].sum() == 0:
            return np.full(n_parts, 1.0 / n_parts)
        row = self.counts[relation].astype(np.float64)
        return row / row.sum()


def most_frequent_part(relation: int, stats: PartStats) -> tuple[int, ...]:
    return (int(np.argmax(stats.distribution(relation))),)


def sample_part(relation: int, stats: PartStats, rng: np.random.Generator) -> tuple[int, ...]:
    dist = stats.distribution(relation)
    return (int(rng.choice(dist.size, p=dist)),)


def nearest_part(point: tuple[int, int], parsing_labels: np.ndarray,
                 subject_mask: Mask | None = None) -> tuple[int, ...]:
    """Part whose parsing pixels come L1-closest to ``point``; ties go to the lower index.

    ``parsing_labels`` holds 0 for background and part index + 1 elsewhere.
    Returns ``()`` when no part pixel is available.
    """
    labels = np.asarray(parsing_labels)
    if subject_mask is not None:
        labels = np.where(subject_mask.to_bitmap(), labels, 0)
    ys, xs = np.nonzero(labels)
    if xs.size == 0:
        return ()
    dist = np.abs(xs - point[0]) + np.abs(ys - point[1])
    best = dist.min()
    return (int(labels[ys, xs][dist == best].min()) - 1,)


def part_baseline(strategy: str, relation: int, stats: PartStats | None = None,
                  rng: np.random.Generator | None = None, point=None,
                  parsing_labels=None, subject_mask: Mask | None = None) -> tuple[int, ...]:
    if strategy == "most_frequent":
        return most_frequent_part(relation, stats)
    if strategy == "sample_by_distribution":
        if rng is None:
            raise ValueError("sample_by_distribution needs a seeded generator")
        return sample_part(relation, stats, rng)
    if strategy == "nearest_part":
        return nearest_part(point, parsing_labels, subject_mask)
    raise ValueError(f"unknown part strategy {strategy!r}; expected one of {PART_STRATEGIES}")


def apply_part_baseline(triplets: list[RelationTriplet], strategy: str, schema: CategorySchema,
                        stats: PartStats | None = None, seed: int = 0,
                        parsing_labels: np.ndarray | None = None) -> list[RelationTriplet]:
    """Replace the decoded parts of action triplets with a baseline's choice."""
    rng = np.random.default_rng(seed)
    out = []
    for t in triplets:
        if schema.is_action(t.relation):
            parts = part_baseline(strategy, t.relation, stats, rng, t.relation_point,
                                  parsing_labels, t.subject.mask)
            t = RelationTriplet(t.relation, t.score, t.subject, t.object, t.relation_point,
                                t.relation_score, parts, {})
        out.append(t)
    return out
