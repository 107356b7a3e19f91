from dataclasses import replace

import numpy as np
import pytest

from hrseg.core import EntityAnnotation, SceneAnnotation
from hrseg.decoder import DecodeConfig, decode, generate_mask
from hrseg.encoder import EncoderConfig, encode
from hrseg.synthgen import (
    IdealTensorRecipe,
    SynthConfig,
    SynthesisError,
    brute_force_eval,
    compare_to_targets,
    generate_scene,
    generate_scenes,
    ideal_tensors,
    roundtrip,
)

from conftest import box_mask, gt, random_metric_instance, triplet


def test_seed_determinism(schema):
    a = generate_scene(SynthConfig(seed=0), schema)
    b = generate_scene(SynthConfig(seed=0), schema)
    assert a.dumps() == b.dumps()
    assert generate_scene(SynthConfig(seed=1), schema).dumps() != a.dumps()


def test_generate_scenes_uses_consecutive_seeds(schema):
    scenes = generate_scenes(SynthConfig(seed=5), 3, schema)
    assert scenes[2].dumps() == generate_scene(SynthConfig(seed=7), schema).dumps()


def test_no_humans_means_no_relations(schema):
    for seed in range(20):
        scene = generate_scene(SynthConfig(seed=seed, human_count=(0, 0)), schema)
        assert scene.relations == ()
        assert all(e.category != schema.human_category_index for e in scene.entities)


def test_unsatisfiable_config_raises(schema):
    cfg = SynthConfig(width=48, height=48, entity_count=(100, 100), size_range=(8, 8),
                      max_retries=3)
    with pytest.raises(SynthesisError):
        generate_scene(cfg, schema)


def test_scenes_validate_and_are_collision_free(schema):
    for seed in range(1000):
        scene = generate_scene(SynthConfig(seed=seed, width=128, height=128), schema)
        scene.validate(schema)
        b = encode(scene, schema)
        assert not any(b.report.counters().values()), seed
        for r in scene.relations:
            assert r.subject_id != r.object_id
            if schema.is_action(r.relation):
                assert 1 <= len(r.parts) <= 2
            else:
                assert r.parts == ()


def test_human_parsing_regions(schema):
    scene = generate_scene(SynthConfig(seed=4), schema)
    humans = [e for e in scene.entities if e.category == schema.human_category_index]
    assert humans
    for h in humans:
        labels = set(np.unique(scene.parsing[h.mask.to_bitmap()])) - {0}
        assert 2 <= len(labels) <= 5


# -- ideal tensors ------------------------------------------------------------------

def test_ideal_masks_are_exact(schema):
    scene = generate_scene(SynthConfig(seed=9), schema)
    bundle = encode(scene, schema)
    ideal = ideal_tensors(bundle, schema)
    for eid, ((x, y), _) in bundle.entity_centers.items():
        mask = generate_mask(ideal.M_kernel, ideal.M_feat, (x, y), DecodeConfig().mask_threshold)
        assert mask == bundle.entity_masks[eid]


def test_ideal_tensors_need_enough_planes(schema):
    bundle = encode(generate_scene(SynthConfig(seed=2), schema), schema)
    with pytest.raises(SynthesisError):
        ideal_tensors(bundle, schema, IdealTensorRecipe(planes=1))


def test_ideal_logit_scale(schema):
    bundle = encode(generate_scene(SynthConfig(seed=2), schema), schema)
    ideal = ideal_tensors(bundle, schema)
    assert set(np.unique(ideal.M_feat)) == {-10.0, 10.0}
    assert set(np.unique(ideal.part_logits)) <= {-10.0, 10.0}
    assert np.array_equal(ideal.Y, bundle.Y) and np.array_equal(ideal.P, bundle.P)


@pytest.mark.parametrize("seed", range(10))
def test_roundtrip_is_exact(schema, seed):
    _, _, result = roundtrip(generate_scene(SynthConfig(seed=seed), schema), schema)
    assert result.exact and result.min_iou == 1.0


def test_off_peak_noise_leaves_triplets_unchanged(schema):
    rng = np.random.default_rng(0)
    for seed in range(30):
        scene = generate_scene(SynthConfig(seed=seed), schema)
        bundle = encode(scene, schema)
        ideal = ideal_tensors(bundle, schema)
        clean, _ = decode(ideal, DecodeConfig(), schema)
        off_peak = ideal.Y < 1.0
        noise = rng.uniform(0, 0.01, ideal.Y.shape).astype(np.float32)
        noisy_y = np.where(off_peak, np.minimum(ideal.Y + noise, 0.999), ideal.Y)
        noisy, _ = decode(replace(ideal, Y=noisy_y), DecodeConfig(), schema)
        assert compare_to_targets(noisy, scene, bundle).exact, seed
        assert [t.sort_key() for t in noisy] == [t.sort_key() for t in clean]


def test_compare_to_targets_flags_wrong_parts(schema):
    scene = generate_scene(SynthConfig(seed=1), schema)
    triplets, bundle, _ = roundtrip(scene, schema)
    action = [t for t in triplets if t.parts]
    assert action
    t = action[0]
    wrong = replace(t, parts=tuple(sorted({(t.parts[0] + 1) % schema.n_parts})))
    result = compare_to_targets([wrong if x is t else x for x in triplets], scene, bundle)
    assert not result.exact and len(result.unexpected) == 1 and len(result.missing) == 1


def test_roundtrip_single_entity_scene(small_schema):
    scene = SceneAnnotation(32, 32, (EntityAnnotation(0, 0, box_mask(4, 4, 12, 12, 32, 32)),))
    triplets, _, result = roundtrip(scene, small_schema, EncoderConfig(grid_size=8))
    assert triplets == [] and result.exact


# -- brute-force mean recall -----------------------------------------------------------

S, O = box_mask(0, 0, 3, 3), box_mask(8, 8, 11, 11)


def test_brute_force_trivial_cases():
    g = [gt(0, S, O), gt(1, O, S, sub_cat=0, obj_cat=1)]
    assert brute_force_eval([[]], [g], 25) == 0.0
    perfect = [triplet(x.relation, x.subject_mask, x.object_mask) for x in g]
    assert brute_force_eval([perfect], [g], 25) == 1.0


def test_brute_force_limits():
    with pytest.raises(ValueError):
        brute_force_eval([[triplet(0, S, O)] * 9], [[gt(0, S, O)]], 25)
    with pytest.raises(ValueError):
        brute_force_eval([[]], [[gt(0, S, O)] * 6], 25)
    with pytest.raises(ValueError):
        brute_force_eval([[]], [[]], 25)


def test_brute_force_counts_duplicates_once():
    g = [gt(0, S, O), gt(0, O, S)]
    assert brute_force_eval([[triplet(0, S, O), triplet(0, S, O, 0.5)]], [g], 25) == 0.5


def test_random_instances_stay_in_domain():
    for seed in range(50):
        preds, gts = random_metric_instance(np.random.default_rng(seed))
        assert all(len(p) <= 8 for p in preds)
        for gs in gts:
            rels = [g.relation for g in gs]
            assert all(rels.count(r) <= 5 for r in rels)
        assert 0.0 <= brute_force_eval(preds, gts, 25) <= 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(width=16, height=16, size_range=(16, 20))
    with pytest.raises(ValueError):
        SynthConfig(min_separation=0)
