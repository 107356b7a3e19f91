"""Ground-truth target construction.

Turns a :class:`SceneAnnotation` into the tensors the three branches regress:
Gaussian center heatmaps for entities and relation points, displacement
records, per-grid-cell instance masks and a downsampled parsing map. All
coordinates in the bundle are feature coordinates (image / stride).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CategorySchema, Mask, SceneAnnotation, mass_center, tight_bbox


@dataclass(frozen=True)
class EncoderConfig:
    stride: int = 4
    grid_size: int = 32
    gaussian_min_overlap: float = 0.7
    sigma_floor: float = 1.0

    def __post_init__(self):
        if self.stride < 1 or self.grid_size < 1:
            raise ValueError("stride and grid_size must be >= 1")
        if not 0 < self.gaussian_min_overlap < 1:
            raise ValueError("gaussian_min_overlap must be in (0, 1)")


@dataclass(frozen=True)
class RelationRecord:
    point: tuple[int, int]
    relation: int
    subject_id: int
    object_id: int
    d_s: tuple[float, float]
    d_o: tuple[float, float]
    parts: tuple[int, ...]

    def parts_multihot(self, n_parts: int) -> np.ndarray:
        v = np.zeros(n_parts, dtype=np.float32)
        v[list(self.parts)] = 1.0
        return v


@dataclass
class EncodeReport:
    center_collisions: list = field(default_factory=list)
    relation_point_collisions: list = field(default_factory=list)
    grid_collisions: list = field(default_factory=list)
    empty_feature_masks: list = field(default_factory=list)

    def counters(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.__dict__.items()}


@dataclass
class TargetBundle:
    Y: np.ndarray
    P: np.ndarray
    relation_records: list[RelationRecord]
    grid_masks: dict[tuple[int, int], tuple[int, Mask]]
    parsing: np.ndarray
    entity_centers: dict[int, tuple[tuple[int, int], int]]
    entity_masks: dict[int, Mask]
    image_width: int
    image_height: int
    stride: int
    grid_size: int
    report: EncodeReport

    @property
    def feature_shape(self) -> tuple[int, int]:
        return self.Y.shape[:2]

    def records_dict(self) -> dict:
        """JSON-ready view of everything that is not a dense tensor."""
        return {
            "image_width": self.image_width,
            "image_height": self.image_height,
            "stride": self.stride,
            "grid_size": self.grid_size,
            "feature_height": self.Y.shape[0],
            "feature_width": self.Y.shape[1],
            "relation_records": [
                {"point": list(r.point), "relation": r.relation, "subject": r.subject_id,
                 "object": r.object_id, "d_s": list(r.d_s), "d_o": list(r.d_o),
                 "parts": list(r.parts)}
                for r in self.relation_records
            ],
            "grid_masks": [
                {"cell": [gx, gy], "entity": eid, "rle": list(m.runs)}
                for (gx, gy), (eid, m) in sorted(self.grid_masks.items())
            ],
            "entity_centers": [
                {"entity": eid, "center": list(c), "category": cat}
                for eid, (c, cat) in sorted(self.entity_centers.items())
            ],
            "report": self.report.counters(),
        }


def quantize_center(center: tuple[float, float], stride: int) -> tuple[int, int]:
    return int(math.floor(center[0] / stride)), int(math.floor(center[1] / stride))


def grid_cell(center: tuple[int, int], grid_size: int, width: int, height: int) -> tuple[int, int]:
    """Grid cell ``(gx, gy)`` of a feature-space point; shared with the decoder."""
    x, y = center
    return (x * grid_size) // width, (y * grid_size) // height


def gaussian_radius(bbox_w: float, bbox_h: float, min_overlap: float = 0.7,
                    floor: float = 1.0) -> float:
    """Largest center shift keeping IoU >= min_overlap, over three box perturbations.

    The three cases are a diagonal translation of the box, shrinking every
    side, and growing every side; each gives a quadratic in the shift and the
    binding case is the smallest admissible root.
    """
    if bbox_w <= 0 or bbox_h <= 0:
        raise ValueError("bbox extents must be positive")
    w, h, mo = float(bbox_w), float(bbox_h), float(min_overlap)
    # translated by (r, r): (w-r)(h-r) / (2wh - (w-r)(h-r)) >= mo
    b1 = w + h
    c1 = w * h * (1 - mo) / (1 + mo)
    r1 = (b1 - math.sqrt(b1 * b1 - 4 * c1)) / 2
    # shrunk by r on each side: (w-2r)(h-2r) / wh >= mo
    b2 = 2 * (w + h)
    c2 = (1 - mo) * w * h
    r2 = (b2 - math.sqrt(b2 * b2 - 16 * c2)) / 8
    # grown by r on each side: wh / ((w+2r)(h+2r)) >= mo
    a3 = 4 * mo
    b3 = 2 * mo * (w + h)
    c3 = (mo - 1) * w * h
    r3 = (-b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3)
    return max(min(r1, r2, r3), floor)


def sigma_from_radius(radius: float) -> float:
    return (2 * radius + 1) / 6


def splat_gaussian(heatmap: np.ndarray, center: tuple[int, int], sigma: float) -> None:
    """Max-splat an unnormalised Gaussian into a 2-D ``(H, W)`` view in place.

    The kernel is truncated to a window of radius ceil(3 sigma); outside it
    the heatmap is left untouched.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    H, W = heatmap.shape
    x, y = center
    if not (0 <= x < W and 0 <= y < H):
        raise ValueError(f"center {center} outside {W}x{H} heatmap")
    r = max(1, int(math.ceil(3 * sigma)))
    x0, x1 = max(0, x - r), min(W, x + r + 1)
    y0, y1 = max(0, y - r), min(H, y + r + 1)
    dx = np.arange(x0, x1) - x
    dy = np.arange(y0, y1) - y
    g = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2 * sigma * sigma))
    window = heatmap[y0:y1, x0:x1]
    np.maximum(window, g, out=window, casting="unsafe")


def downsample_nearest(image: np.ndarray, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Sample pixel ``(x*s + s//2, y*s + s//2)``; samples past the image read as 0."""
    ys = np.arange(out_h) * stride + stride // 2
    xs = np.arange(out_w) * stride + stride // 2
    out = np.zeros((out_h, out_w), dtype=image.dtype)
    yi, xi = ys < image.shape[0], xs < image.shape[1]
    out[np.ix_(yi, xi)] = image[np.ix_(ys[yi], xs[xi])]
    return out


def _feature_extent(mask: Mask, stride: int) -> tuple[float, float]:
    x0, y0, x1, y1 = tight_bbox(mask)
    return (x1 - x0 + 1) / stride, (y1 - y0 + 1) / stride


def encode(scene: SceneAnnotation, schema: CategorySchema,
           cfg: EncoderConfig = EncoderConfig()) -> TargetBundle:
    s = cfg.stride
    H = -(-scene.image_height // s)
    W = -(-scene.image_width // s)
    Y = np.zeros((H, W, schema.n_entities), dtype=np.float32)
    P = np.zeros((H, W, schema.n_relations), dtype=np.float32)
    report = EncodeReport()

    centers: dict[int, tuple[int, int]] = {}
    entity_centers = {}
    entity_masks = {}
    grid_masks = {}
    seen_centers: dict[tuple[int, int, int], int] = {}
    for e in scene.entities:
        c = quantize_center(mass_center(e.mask), s)
        centers[e.id] = c
        entity_centers[e.id] = (c, e.category)
        key = (c[0], c[1], e.category)
        if key in seen_centers:
            report.center_collisions.append((seen_centers[key], e.id))
        else:
            seen_centers[key] = e.id
        bw, bh = _feature_extent(e.mask, s)
        r = gaussian_radius(bw, bh, cfg.gaussian_min_overlap, cfg.sigma_floor)
        splat_gaussian(Y[:, :, e.category], c, sigma_from_radius(r))

        small = downsample_nearest(e.mask.to_bitmap(), s, H, W)
        if not small.any():
            report.empty_feature_masks.append(e.id)
            continue
        fm = Mask.from_bitmap(small)
        entity_masks[e.id] = fm
        cell = grid_cell(c, cfg.grid_size, W, H)
        if cell in grid_masks:
            report.grid_collisions.append((grid_masks[cell][0], e.id))
        else:
            grid_masks[cell] = (e.id, fm)

    records = []
    seen_points: dict[tuple[int, int, int], int] = {}
    for idx, rel in enumerate(scene.relations):
        xs, ys = centers[rel.subject_id]
        xo, yo = centers[rel.object_id]
        xr, yr = (xs + xo) // 2, (ys + yo) // 2
        key = (xr, yr, rel.relation)
        if key in seen_points:
            report.relation_point_collisions.append((seen_points[key], idx))
        else:
            seen_points[key] = idx
        subj, obj = scene.entity(rel.subject_id), scene.entity(rel.object_id)
        union = Mask.from_bitmap(subj.mask.to_bitmap() | obj.mask.to_bitmap())
        bw, bh = _feature_extent(union, s)
        r = gaussian_radius(bw, bh, cfg.gaussian_min_overlap, cfg.sigma_floor)
        splat_gaussian(P[:, :, rel.relation], (xr, yr), sigma_from_radius(r))
        records.append(RelationRecord(
            point=(xr, yr), relation=rel.relation,
            subject_id=rel.subject_id, object_id=rel.object_id,
            d_s=(float(xs - xr), float(ys - yr)), d_o=(float(xo - xr), float(yo - yr)),
            parts=rel.parts,
        ))

    if scene.parsing is not None:
        parsing = downsample_nearest(scene.parsing, s, H, W).astype(np.float32)
    else:
        parsing = np.zeros((H, W), dtype=np.float32)

    return TargetBundle(
        Y=Y, P=P, relation_records=records, grid_masks=grid_masks, parsing=parsing,
        entity_centers=entity_centers, entity_masks=entity_masks,
        image_width=scene.image_width, image_height=scene.image_height,
        stride=s, grid_size=cfg.grid_size, report=report,
    )
