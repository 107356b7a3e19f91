import numpy as np
import pytest

from hrseg.core import CategorySchema, Mask
from hrseg.decoder import EntityPrediction, RelationTriplet
from hrseg.evaluator import GroundTruthTriplet


def mask_from_pixels(pixels, width=4, height=4) -> Mask:
    bitmap = np.zeros((height, width), dtype=bool)
    for x, y in pixels:
        bitmap[y, x] = True
    return Mask.from_bitmap(bitmap)


def box_mask(x0, y0, x1, y1, width=16, height=16) -> Mask:
    """Inclusive box."""
    bitmap = np.zeros((height, width), dtype=bool)
    bitmap[y0:y1 + 1, x0:x1 + 1] = True
    return Mask.from_bitmap(bitmap)


def triplet(relation, sub_mask, obj_mask, score=1.0, sub_cat=0, obj_cat=1, parts=()):
    return RelationTriplet(
        relation=relation, score=score,
        subject=EntityPrediction(sub_cat, (0, 0), sub_mask, 1.0),
        object=EntityPrediction(obj_cat, (0, 0), obj_mask, 1.0),
        parts=tuple(parts),
    )


def gt(relation, sub_mask, obj_mask, sub_cat=0, obj_cat=1, parts=()):
    return GroundTruthTriplet(relation, sub_cat, obj_cat, sub_mask, obj_mask, tuple(parts))


@pytest.fixture(scope="session")
def schema():
    return CategorySchema.default()


@pytest.fixture(scope="session")
def small_schema():
    return CategorySchema(
        entity_names=("human", "cup", "table"),
        relation_names=("next_to", "hold"),
        relation_kinds=("geometric", "action"),
        part_names=("left_arm", "right_arm", "right_shoe"),
    )


def random_metric_instance(rng, n_images=None, n_relations=3, canvas=12):
    """Small random evaluation problem with overlapping masks and duplicate predictions.

    At most 8 predictions per image and 5 ground truths per relation per image.
    """
    n_images = int(rng.integers(1, 4)) if n_images is None else n_images

    def rand_box():
        x0, y0 = (int(v) for v in rng.integers(0, canvas - 2, 2))
        w, h = (int(v) for v in rng.integers(2, 6, 2))
        return box_mask(x0, y0, min(canvas - 1, x0 + w), min(canvas - 1, y0 + h), canvas, canvas)

    def jitter(m):
        # a nearby box: shares pixels with m most of the time
        b = m.to_bitmap()
        b = np.roll(b, int(rng.integers(-1, 2)), axis=int(rng.integers(0, 2)))
        if not b.any():
            return m
        return Mask.from_bitmap(b)

    preds_per_image, gts_per_image = [], []
    for _ in range(n_images):
        gts = []
        for _ in range(int(rng.integers(0, 6))):
            rel = int(rng.integers(0, n_relations))
            if sum(g.relation == rel for g in gts) >= 5:
                continue
            parts = tuple(sorted(rng.choice(3, size=int(rng.integers(0, 2)), replace=False).tolist()))
            gts.append(gt(rel, rand_box(), rand_box(), sub_cat=0,
                          obj_cat=int(rng.integers(1, 3)), parts=parts))
        preds = []
        for _ in range(int(rng.integers(0, 9))):
            if gts and rng.random() < 0.7:
                g = gts[int(rng.integers(len(gts)))]
                sub, obj = jitter(g.subject_mask), jitter(g.object_mask)
                rel, obj_cat, parts = g.relation, g.object_category, g.parts
                if rng.random() < 0.15:
                    rel = int(rng.integers(0, n_relations))
                if rng.random() < 0.2:
                    parts = tuple(sorted(rng.choice(3, size=1).tolist()))
            else:
                sub, obj = rand_box(), rand_box()
                rel, obj_cat, parts = int(rng.integers(0, n_relations)), int(rng.integers(1, 3)), ()
            score = float(rng.choice([0.1, 0.3, 0.5, 0.5, 0.9]))
            preds.append(triplet(rel, sub, obj, score, 0, obj_cat, parts))
        preds_per_image.append(preds)
        gts_per_image.append(gts)
    if not any(gts_per_image):
        gts_per_image[0].append(gt(0, rand_box(), rand_box()))
    return preds_per_image, gts_per_image


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
