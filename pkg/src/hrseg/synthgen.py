"""Seeded synthetic scenes, ideal branch outputs and brute-force oracles.

Randomness comes from numpy's PCG64 bit generator seeded through
``numpy.random.default_rng(seed)``; both are fixed, documented algorithms,
so a seed yields the same scene on every platform.

Scenes are collision-free by construction: every entity owns a distinct
quantized center and grid cell, same-category centers and same-class
relation points are at least ``min_separation`` apart (Chebyshev, feature
pixels), and relation points never share a pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    CategorySchema,
    EntityAnnotation,
    Mask,
    RelationAnnotation,
    SceneAnnotation,
    mask_iou,
    mass_center,
)
from .decoder import DecodeConfig, PredictionBundle, RelationTriplet, decode
from .encoder import EncoderConfig, TargetBundle, encode, grid_cell, quantize_center
from .evaluator import HRS, GroundTruthTriplet


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    width: int = 256
    height: int = 256
    stride: int = 4
    grid_size: int = 32
    entity_count: tuple[int, int] = (2, 8)
    human_count: tuple[int, int] = (1, 3)
    relation_count: tuple[int, int] = (1, 6)
    shapes: tuple[str, ...] = ("ellipse", "rectangle")
    # half-extent of a shape, image pixels
    size_range: tuple[int, int] = (16, 44)
    min_separation: int = 2
    object_category_pool: int = 12
    parts_per_action: tuple[int, int] = (1, 2)
    parts_per_human: tuple[int, int] = (2, 5)
    # probability mass of each action relation's dominant part
    part_skew: float = 0.7
    max_retries: int = 200

    def __post_init__(self):
        for name in ("entity_count", "human_count", "relation_count", "size_range",
                     "parts_per_action", "parts_per_human"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a nonnegative (lo, hi) range")
        if self.min_separation < 1:
            raise ValueError("min_separation must be >= 1")
        if not set(self.shapes) <= {"ellipse", "rectangle"} or not self.shapes:
            raise ValueError("shapes must be drawn from ellipse/rectangle")
        if 2 * self.size_range[0] + 1 > min(self.width, self.height):
            raise ValueError("shapes do not fit in the image")


def dominant_part(relation: int, n_parts: int) -> int:
    return (7 * relation + 3) % n_parts


def part_distribution(relation: int, n_parts: int, skew: float) -> np.ndarray:
    """Skewed part distribution used for action relations."""
    dist = np.full(n_parts, (1 - skew) / max(n_parts - 1, 1))
    dist[dominant_part(relation, n_parts)] = skew if n_parts > 1 else 1.0
    return dist / dist.sum()


def _rasterize(shape, cx, cy, a, b, width, height) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    if shape == "ellipse":
        return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
    return (np.abs(xs - cx) <= a) & (np.abs(ys - cy) <= b)


def _chebyshev(p, q) -> int:
    return max(abs(p[0] - q[0]), abs(p[1] - q[1]))


@dataclass
class _Placed:
    id: int
    category: int
    bitmap: np.ndarray
    center: tuple[int, int]
    cell: tuple[int, int]


def _place_entities(rng, cfg: SynthConfig, schema: CategorySchema, n_ent: int, n_h: int):
    W0, H0 = cfg.width, cfg.height
    H, W = -(-H0 // cfg.stride), -(-W0 // cfg.stride)
    others = [c for c in range(schema.n_entities) if c != schema.human_category_index]
    pool = others[:max(1, cfg.object_category_pool)] if others else [schema.human_category_index]
    placed: list[_Placed] = []
    for idx in range(n_ent):
        category = schema.human_category_index if idx < n_h else int(rng.choice(pool))
        for _ in range(50):
            shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            a, b = (int(v) for v in rng.integers(cfg.size_range[0], cfg.size_range[1] + 1, 2))
            a, b = min(a, (W0 - 1) // 2), min(b, (H0 - 1) // 2)
            cx = float(rng.integers(a, W0 - a)) + (0.5 if shape == "ellipse" else 0.0)
            cy = float(rng.integers(b, H0 - b)) + (0.5 if shape == "ellipse" else 0.0)
            bitmap = _rasterize(shape, cx, cy, a, b, W0, H0)
            if not bitmap.any():
                continue
            mask = Mask.from_bitmap(bitmap)
            center = quantize_center(mass_center(mask), cfg.stride)
            cell = grid_cell(center, cfg.grid_size, W, H)
            ok = all(
                p.cell != cell and p.center != center
                and (p.category != category or _chebyshev(p.center, center) >= cfg.min_separation)
                for p in placed
            )
            if ok:
                placed.append(_Placed(idx, category, bitmap, center, cell))
                break
        else:
            return None
    return placed


def _draw_parts(rng, relation: int, k: int, n_parts: int, skew: float) -> tuple[int, ...]:
    dist = part_distribution(relation, n_parts, skew)
    k = min(k, n_parts)
    return tuple(sorted(int(p) for p in rng.choice(n_parts, size=k, replace=False, p=dist)))


def _draw_relations(rng, cfg: SynthConfig, schema: CategorySchema, placed, n_rel: int):
    humans = [p for p in placed if p.category == schema.human_category_index]
    pairs = [(h, o) for h in humans for o in placed if o.id != h.id]
    order = rng.permutation(len(pairs))
    relations, points = [], []
    for pi in order:
        if len(relations) == n_rel:
            break
        h, o = pairs[pi]
        rel = int(rng.integers(schema.n_relations))
        pt = ((h.center[0] + o.center[0]) // 2, (h.center[1] + o.center[1]) // 2)
        if any(pt == q for q, _ in points):
            continue
        if any(c == rel and _chebyshev(pt, q) < cfg.min_separation for q, c in points):
            continue
        parts: tuple[int, ...] = ()
        if schema.is_action(rel):
            k = int(rng.integers(cfg.parts_per_action[0], cfg.parts_per_action[1] + 1))
            parts = _draw_parts(rng, rel, max(k, 1), schema.n_parts, cfg.part_skew)
        points.append((pt, rel))
        relations.append(RelationAnnotation(h.id, o.id, rel, parts))
    return relations


def _paint_parsing(rng, cfg: SynthConfig, schema: CategorySchema, placed, relations):
    parsing = np.zeros((cfg.height, cfg.width), dtype=np.int32)
    for p in placed:
        if p.category != schema.human_category_index:
            continue
        wanted = sorted({q for r in relations if r.subject_id == p.id for q in r.parts})
        n = int(rng.integers(cfg.parts_per_human[0], cfg.parts_per_human[1] + 1))
        n = min(max(n, len(wanted)), schema.n_parts)
        rest = [q for q in range(schema.n_parts) if q not in wanted]
        extra = rng.choice(rest, size=n - len(wanted), replace=False).tolist() if rest else []
        labels = [int(q) for q in rng.permutation(wanted + extra)]
        if not labels:
            continue
        ys = np.flatnonzero(p.bitmap.any(axis=1))
        bounds = np.linspace(ys[0], ys[-1] + 1, len(labels) + 1)
        rows = np.arange(cfg.height)
        for label, y0, y1 in zip(labels, bounds[:-1], bounds[1:]):
            band = ((rows >= y0) & (rows < y1))[:, None] & p.bitmap
            parsing[band] = label + 1
    return parsing


def generate_scene(cfg: SynthConfig = SynthConfig(),
                   schema: CategorySchema | None = None) -> SceneAnnotation:
    schema = schema or CategorySchema.default()
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.max_retries):
        n_ent = int(rng.integers(cfg.entity_count[0], cfg.entity_count[1] + 1))
        n_ent = max(n_ent, cfg.human_count[0])
        n_h = int(rng.integers(cfg.human_count[0], min(cfg.human_count[1], n_ent) + 1))
        placed = _place_entities(rng, cfg, schema, n_ent, n_h)
        if placed is None:
            continue
        can_relate = n_h > 0 and n_ent >= 2
        n_rel = int(rng.integers(cfg.relation_count[0], cfg.relation_count[1] + 1)) \
            if can_relate else 0
        relations = _draw_relations(rng, cfg, schema, placed, n_rel)
        if can_relate and len(relations) < min(cfg.relation_count[0], n_rel):
            continue
        parsing = _paint_parsing(rng, cfg, schema, placed, relations)
        entities = tuple(EntityAnnotation(p.id, p.category, Mask.from_bitmap(p.bitmap))
                         for p in placed)
        return SceneAnnotation(cfg.width, cfg.height, entities, tuple(relations), parsing)
    raise SynthesisError(f"seed {cfg.seed}: no collision-free scene after "
                         f"{cfg.max_retries} attempts")


def generate_scenes(cfg: SynthConfig, count: int, schema: CategorySchema | None = None):
    """``count`` scenes with seeds ``cfg.seed, cfg.seed + 1, ...``."""
    return [generate_scene(replace(cfg, seed=cfg.seed + i), schema) for i in range(count)]


# -- ideal branch outputs ----------------------------------------------------------

@dataclass(frozen=True)
class IdealTensorRecipe:
    """How targets become saturated network outputs.

    Each positive grid cell gets its own mask-feature plane holding its
    entity mask as +/- ``logit_scale``; the cell's kernel is one-hot on that
    plane. ``planes`` defaults to one per positive cell.
    """

    planes: int | None = None
    logit_scale: float = 10.0

    def plane_assignment(self, bundle: TargetBundle) -> dict[tuple[int, int], int]:
        return {cell: i for i, cell in enumerate(sorted(bundle.grid_masks))}


def ideal_tensors(bundle: TargetBundle, schema: CategorySchema | None = None,
                  recipe: IdealTensorRecipe = IdealTensorRecipe()) -> PredictionBundle:
    schema = schema or CategorySchema.default()
    H, W = bundle.feature_shape
    S = bundle.grid_size
    z = recipe.logit_scale
    assign = recipe.plane_assignment(bundle)
    D = recipe.planes if recipe.planes is not None else max(1, len(assign))
    if len(assign) > D:
        raise SynthesisError(f"{len(assign)} entities need more than {D} feature planes")

    m_feat = np.zeros((H, W, D), dtype=np.float32)
    m_kernel = np.zeros((S, S, D), dtype=np.float32)
    for (gx, gy), plane in assign.items():
        _, mask = bundle.grid_masks[(gx, gy)]
        m_feat[:, :, plane] = np.where(mask.to_bitmap(), z, -z)
        m_kernel[gy, gx, plane] = 1.0

    d_s = np.zeros((H, W, 2), dtype=np.float32)
    d_o = np.zeros((H, W, 2), dtype=np.float32)
    part_logits = np.full((H, W, schema.n_parts), -z, dtype=np.float32)
    for r in bundle.relation_records:
        x, y = r.point
        d_s[y, x] = r.d_s
        d_o[y, x] = r.d_o
        part_logits[y, x] = np.where(r.parts_multihot(schema.n_parts) > 0, z, -z)

    labels = bundle.parsing.astype(np.int64)
    p_sem = np.full((H, W, schema.n_parts + 1), -z, dtype=np.float32)
    np.put_along_axis(p_sem, labels[:, :, None], z, axis=2)

    return PredictionBundle(Y=bundle.Y.copy(), P=bundle.P.copy(), D_s=d_s, D_o=d_o,
                            part_logits=part_logits, M_kernel=m_kernel, M_feat=m_feat,
                            P_sem=p_sem)


# -- roundtrip check ---------------------------------------------------------------

@dataclass
class RoundtripResult:
    expected: int
    matched: int
    missing: list = field(default_factory=list)
    unexpected: list = field(default_factory=list)
    min_iou: float = 1.0

    @property
    def exact(self) -> bool:
        return self.matched == self.expected and not self.missing and not self.unexpected


def compare_to_targets(triplets: list[RelationTriplet], scene: SceneAnnotation,
                       bundle: TargetBundle, min_iou: float = 0.99) -> RoundtripResult:
    """Match decoded triplets to the scene's relations at feature scale.

    A decoded triplet matches when relation, categories, centers and parts
    agree and both masks reach ``min_iou`` against the encoded entity masks.
    """
    expected = {}
    for r in scene.relations:
        sc, scat = bundle.entity_centers[r.subject_id]
        oc, ocat = bundle.entity_centers[r.object_id]
        key = (r.relation, scat, sc, ocat, oc, tuple(r.parts))
        expected.setdefault(key, []).append(r)
    result = RoundtripResult(expected=len(scene.relations), matched=0)
    for t in triplets:
        key = (t.relation, t.subject.category, t.subject.center, t.object.category,
               t.object.center, tuple(t.parts))
        pending = expected.get(key)
        if not pending:
            result.unexpected.append(key)
            continue
        r = pending.pop()
        iou = min(mask_iou(t.subject.mask, bundle.entity_masks[r.subject_id]),
                  mask_iou(t.object.mask, bundle.entity_masks[r.object_id]))
        result.min_iou = min(result.min_iou, iou)
        if iou >= min_iou:
            result.matched += 1
        else:
            result.missing.append(key)
    result.missing.extend(k for k, v in expected.items() for _ in v)
    return result


def roundtrip(scene: SceneAnnotation, schema: CategorySchema | None = None,
              enc: EncoderConfig | None = None, dec: DecodeConfig = DecodeConfig()):
    """Encode, build ideal outputs, decode; return ``(triplets, bundle, result)``."""
    schema = schema or CategorySchema.default()
    enc = enc or EncoderConfig()
    bundle = encode(scene, schema, enc)
    triplets, _ = decode(ideal_tensors(bundle, schema), dec, schema)
    return triplets, bundle, compare_to_targets(triplets, scene, bundle)


# -- brute-force mean recall -------------------------------------------------------

MAX_BRUTE_PREDS = 8
MAX_BRUTE_GT_PER_CATEGORY = 5


def _pixel_set(mask: Mask) -> frozenset:
    out, pos = set(), 0
    for i, run in enumerate(mask.runs):
        if i % 2 == 1:
            out.update(range(pos, pos + run))
        pos += run
    return frozenset(out)


def _set_iou(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def _best_assignment(tp: list[list[bool]], i: int = 0, used: frozenset = frozenset()) -> int:
    if i == len(tp):
        return 0
    best = _best_assignment(tp, i + 1, used)  # prediction i stays unmatched
    for j, ok in enumerate(tp[i]):
        if ok and j not in used:
            best = max(best, 1 + _best_assignment(tp, i + 1, used | {j}))
    return best


def brute_force_eval(preds_per_image, gts_per_image, k: int,
                     iou_thresholds=(0.25, 0.5, 0.75), mode: str = "RS") -> float:
    """Mean Recall@K by exhaustive search over one-to-one assignments.

    Only for small instances: at most 8 predictions per image and 5 ground
    truths per relation category per image.
    """
    hrs = mode.upper() == HRS
    per_image = []
    totals: dict[int, int] = {}
    for preds, gts in zip(preds_per_image, gts_per_image):
        if len(preds) > MAX_BRUTE_PREDS:
            raise ValueError("instance too large for brute force")
        kept = sorted(preds, key=lambda p: p.sort_key())[:k]
        by_cat: dict[int, list[GroundTruthTriplet]] = {}
        for g in gts:
            by_cat.setdefault(g.relation, []).append(g)
            totals[g.relation] = totals.get(g.relation, 0) + 1
        if any(len(v) > MAX_BRUTE_GT_PER_CATEGORY for v in by_cat.values()):
            raise ValueError("instance too large for brute force")
        per_image.append((kept, by_cat))
    if not totals:
        raise ValueError("no ground truth")

    mean_per_tau = []
    for tau in iou_thresholds:
        hits = dict.fromkeys(totals, 0)
        for kept, by_cat in per_image:
            for c, gts in by_cat.items():
                cand = [p for p in kept if p.relation == c]
                tp = []
                for p in cand:
                    ps, po = _pixel_set(p.subject.mask), _pixel_set(p.object.mask)
                    row = []
                    for g in gts:
                        ok = (p.subject.category == g.subject_category
                              and p.object.category == g.object_category
                              and (not hrs or sorted(p.parts) == sorted(g.parts))
                              and _set_iou(ps, _pixel_set(g.subject_mask)) > tau
                              and _set_iou(po, _pixel_set(g.object_mask)) > tau)
                        row.append(ok)
                    tp.append(row)
                hits[c] += _best_assignment(tp)
        mean_per_tau.append(float(np.mean([hits[c] / totals[c] for c in sorted(totals)])))
    return float(np.mean(mean_per_tau))


# -- benchmark input ---------------------------------------------------------------

def bench_bundle(feature_size: int = 128, schema: CategorySchema | None = None,
                 seed: int = 0, noise: float = 0.05) -> PredictionBundle:
    """Ideal outputs for one scene with ``feature_size`` square features.

    Low uniform noise on every heatmap channel makes peak extraction scan the
    whole tensor, as it would on real network output.
    """
    schema = schema or CategorySchema.default()
    enc = EncoderConfig()
    side = feature_size * enc.stride
    cfg = SynthConfig(seed=seed, width=side, height=side,
                      size_range=(max(16, side // 16), max(16, side // 6)))
    bundle = ideal_tensors(encode(generate_scene(cfg, schema), schema, enc), schema)
    rng = np.random.default_rng(seed)
    for name in ("Y", "P"):
        h = getattr(bundle, name)
        h += rng.uniform(0, noise, h.shape).astype(np.float32) * (h < 1)
    return bundle
