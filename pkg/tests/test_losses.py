import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hrseg.core import EntityAnnotation, SceneAnnotation
from hrseg.encoder import EncoderConfig, RelationRecord, encode
from hrseg.gradcheck_suite import run_suite
from hrseg.losses import (
    EPS,
    LossReport,
    LossWeights,
    cross_entropy_loss,
    dice_loss,
    displacement_loss,
    focal_heatmap_loss,
    gradcheck,
    lovasz_softmax_loss,
    mask_loss,
    parsing_loss,
    part_bce_loss,
    total_loss,
)
from hrseg.synthgen import SynthConfig, generate_scene, ideal_tensors

from conftest import box_mask


def _record(point=(0, 0), d_s=(0.0, 0.0), d_o=(0.0, 0.0), parts=()):
    return RelationRecord(point, 0, 0, 1, d_s, d_o, parts)


# -- focal ------------------------------------------------------------------------

def test_focal_closed_forms():
    value, _ = focal_heatmap_loss(np.array([0.5]), np.array([1.0]), n_pos=1)
    assert value == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert value == pytest.approx(0.17329, abs=1e-5)

    value, _ = focal_heatmap_loss(np.array([0.9, 0.1]), np.array([1.0, 0.2]), n_pos=1)
    expected = 0.01 * -math.log(0.9) + 0.8 ** 4 * 0.1 ** 2 * -math.log(0.9)
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(0.0014852, abs=1e-7)


def test_focal_perfect_positive_is_zero():
    value, _ = focal_heatmap_loss(np.array([1 - EPS]), np.array([1.0]), n_pos=1)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_focal_zero_positives_normalises_by_one():
    value, _ = focal_heatmap_loss(np.array([0.5]), np.array([0.0]), n_pos=0)
    assert value == pytest.approx(0.25 * math.log(2))


def test_focal_shape_mismatch():
    with pytest.raises(ValueError):
        focal_heatmap_loss(np.zeros(3), np.zeros(4))


unit = st.floats(0, 1, allow_nan=False)


@given(arrays(np.float64, 6, elements=unit), arrays(np.float64, 6, elements=unit))
def test_focal_nonnegative(pred, target):
    assert focal_heatmap_loss(pred, target)[0] >= 0


def test_focal_zero_only_at_clamped_ideal():
    target = np.array([1.0, 0.3, 0.0])
    assert focal_heatmap_loss(np.array([1.0, 0.0, 0.0]), target)[0] == pytest.approx(0, abs=1e-6)
    assert focal_heatmap_loss(np.array([1.0, 0.1, 0.0]), target)[0] > 1e-4


# -- dice and mask loss ---------------------------------------------------------------

def test_dice_examples():
    a = np.array([1.0, 1.0, 0.0])
    assert dice_loss(a, a)[0] == 0.0
    assert dice_loss(a, np.array([0.0, 0.0, 1.0]))[0] == 1.0
    # target {a,b}, prediction {b,c}
    assert dice_loss(np.array([0.0, 1.0, 1.0]), a)[0] == pytest.approx(0.5)


def test_dice_both_empty_raises():
    with pytest.raises(ValueError):
        dice_loss(np.zeros(4), np.zeros(4))


@given(arrays(bool, 8), arrays(bool, 8))
def test_dice_range_and_symmetry(a, b):
    if not (a.any() or b.any()):
        return
    v = dice_loss(a.astype(float), b.astype(float))[0]
    assert 0 <= v <= 1
    assert v == dice_loss(b.astype(float), a.astype(float))[0]


def _two_cell_bundle(schema):
    e0 = EntityAnnotation(0, 0, box_mask(0, 0, 7, 7, 32, 32))
    e1 = EntityAnnotation(1, 1, box_mask(20, 20, 27, 27, 32, 32))
    return encode(SceneAnnotation(32, 32, (e0, e1)), schema, EncoderConfig(stride=4, grid_size=2))


def test_mask_loss_examples(small_schema):
    b = _two_cell_bundle(small_schema)
    assert len(b.grid_masks) == 2
    perfect = {cell: m.to_bitmap().astype(float) for cell, (_, m) in b.grid_masks.items()}
    assert mask_loss(perfect, b)[0] == 0.0
    (c0, c1) = sorted(perfect)
    half = {c0: perfect[c0], c1: 1.0 - perfect[c1]}
    assert mask_loss(half, b)[0] == pytest.approx(0.5)
    with pytest.raises(KeyError):
        mask_loss({c0: perfect[c0]}, b)
    empty = encode(SceneAnnotation(32, 32, ()), small_schema)
    assert mask_loss({}, empty)[0] == 0.0


# -- displacement ------------------------------------------------------------------

def test_displacement_examples():
    d = np.zeros((2, 2, 2))
    exact = _record((0, 0), (1.0, 2.0), (-1.0, 0.0))
    d_s, d_o = d.copy(), d.copy()
    d_s[0, 0] = (1.0, 2.0)
    d_o[0, 0] = (-1.0, 0.0)
    assert displacement_loss(d_s, d_o, [exact])[0] == 0.0
    off = _record((0, 0), (2.0, 3.0), (0.0, 1.0))
    assert displacement_loss(d_s, d_o, [off])[0] == 4.0
    second = _record((1, 1), (1.0, 0.0), (0.0, 0.0))
    assert displacement_loss(d_s, d_o, [exact, second])[0] == 0.5


def test_displacement_out_of_bounds():
    with pytest.raises(IndexError):
        displacement_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), [_record((2, 0))])


# -- part BCE ----------------------------------------------------------------------

def test_part_bce_examples():
    logits = np.zeros((1, 1, 2))
    assert part_bce_loss(logits, [_record(parts=(0,))])[0] == pytest.approx(math.log(2))
    assert part_bce_loss(logits, [_record(parts=(0,))])[0] == pytest.approx(0.69315, abs=1e-5)
    saturated = np.array([[[40.0, -40.0]]])
    assert part_bce_loss(saturated, [_record(parts=(0,))])[0] == pytest.approx(0, abs=1e-12)


def test_part_bce_class_permutation():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(1, 1, 4))
    perm = np.array([2, 0, 3, 1])
    inv = np.argsort(perm)
    a = part_bce_loss(z, [_record(parts=(0, 1))])[0]
    # permute classes together with their targets
    b = part_bce_loss(z[:, :, perm], [_record(parts=tuple(sorted(inv[[0, 1]].tolist())))])[0]
    assert a == pytest.approx(b, abs=1e-12)


def test_part_bce_stable_for_large_logits():
    z = np.array([[[1000.0, -1000.0]]])
    value, grad = part_bce_loss(z, [_record(parts=(1,))])
    assert value == pytest.approx(1000.0) and np.all(np.isfinite(grad))


# -- Lovász, CE and parsing -----------------------------------------------------------

def _logits_for(probs):
    return np.log(np.asarray(probs, dtype=np.float64))


def test_lovasz_examples():
    assert lovasz_softmax_loss(_logits_for([[[0.3, 0.7]]]), np.array([[0]]))[0] == \
        pytest.approx(0.7)
    assert lovasz_softmax_loss(_logits_for([[[0.5, 0.5]]]), np.array([[1]]))[0] == \
        pytest.approx(0.5)
    perfect = np.array([[[50.0, -50.0], [-50.0, 50.0]]])
    assert lovasz_softmax_loss(perfect, np.array([[0, 1]]))[0] == pytest.approx(0, abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2 ** 31 - 1))
def test_lovasz_pixel_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(1, 9, 4))
    labels = rng.integers(0, 4, (1, 9))
    perm = rng.permutation(9)
    a = lovasz_softmax_loss(z, labels)[0]
    b = lovasz_softmax_loss(z[:, perm], labels[:, perm])[0]
    assert a == pytest.approx(b, abs=1e-12)


def test_parsing_examples():
    uniform = np.zeros((1, 1, 2))
    value, _ = parsing_loss(uniform, np.array([[1]]))
    assert value == pytest.approx(math.log(2) + 0.5, abs=1e-12)
    assert value == pytest.approx(1.19315, abs=1e-5)
    perfect = np.array([[[-50.0, 50.0]]])
    assert parsing_loss(perfect, np.array([[1]]))[0] == pytest.approx(0, abs=1e-12)


def test_parsing_loss_decreases_with_gt_probability():
    lo = parsing_loss(_logits_for([[[0.4, 0.6]]]), np.array([[0]]))[0]
    hi = parsing_loss(_logits_for([[[0.6, 0.4]]]), np.array([[0]]))[0]
    assert hi < lo


def test_parsing_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy_loss(np.zeros((1, 1, 2)), np.array([[2]]))


# -- totals ------------------------------------------------------------------------

def test_loss_weight_defaults():
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4, w.alpha, w.beta) == (3, 1, 20, 5, 2, 4)
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1)


def test_total_closed_forms():
    assert LossReport.combine(0, 0, 0, 0, 0, 0).total == 0
    assert LossReport.combine(1, 1, 1, 1, 1, 1).total == 31


@given(st.lists(st.floats(0, 10), min_size=6, max_size=6), st.floats(0, 10))
def test_total_linear_in_lambda3(parts, lam):
    base = LossWeights(lambda3=lam)
    doubled = replace(base, lambda3=2 * lam)
    a = LossReport.combine(*parts, base).total
    b = LossReport.combine(*parts, doubled).total
    assert b - a == pytest.approx(lam * parts[4], rel=1e-9, abs=1e-9)


def test_total_loss_on_ideal_outputs(schema):
    scene = generate_scene(SynthConfig(seed=3), schema)
    bundle = encode(scene, schema)
    ideal = ideal_tensors(bundle, schema)
    report = total_loss(ideal, bundle)
    # off-peak pixels equal to their soft targets still pay the negative focal term
    assert report.l_ent > 0 and report.l_rel > 0
    assert report.l_disp == 0.0
    assert report.l_mask < 1e-3 and report.l_part < 1e-3 and report.l_human < 1e-3
    assert report.total == pytest.approx(
        report.l_ent + report.l_rel + 3 * report.l_mask + report.l_disp
        + 20 * report.l_part + 5 * report.l_human, rel=1e-6)
    noisy = replace(ideal, Y=np.clip(ideal.Y + 0.05, 0, 1), D_s=ideal.D_s + 0.5)
    worse = total_loss(noisy, bundle)
    assert worse.l_ent > report.l_ent and worse.l_disp > 0


# -- gradient checks -----------------------------------------------------------------

def test_gradcheck_quadratic():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    fn = lambda x: (float(x @ a @ x), 2 * a @ x)  # noqa: E731
    assert gradcheck(fn, np.array([0.3, -1.2])) < 1e-8


def test_gradcheck_rejects_nonfinite():
    with pytest.raises(ValueError):
        gradcheck(lambda x: (float("nan"), x), np.zeros(2))


def test_gradient_suite_quick():
    errors = run_suite(points=10, seed=11)
    assert set(errors) >= {"focal", "dice", "displacement", "part_bce", "lovasz", "parsing"}
    assert max(errors.values()) < 1e-4
