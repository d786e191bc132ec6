"""Synthetic benchmark: rendering determinism, texture statistics,
scenario integrity, split hygiene, and few-shot subsampling arithmetic."""

import numpy as np
import pytest

from diva.bench import (
    IMAGE_SIZE,
    ScenarioConfig,
    SyntheticClassSpec,
    default_adaptation_specs,
    default_pretrain_specs,
    generate_scenario,
    quadrant_means,
    render_batch,
    render_image,
    stump_location,
    subsample_few_shot,
)
from diva.encoders import ConfigError


def spec(texture="solid", shape="disk", location="center", noise=0.05, cid=0):
    return SyntheticClassSpec(cid, texture, shape, location, noise)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def test_render_deterministic_in_all_keys():
    a = render_image(spec(), 3, seed=7)
    b = render_image(spec(), 3, seed=7)
    assert a.tobytes() == b.tobytes()
    assert render_image(spec(), 4, seed=7).tobytes() != a.tobytes()
    assert render_image(spec(), 3, seed=8).tobytes() != a.tobytes()
    assert render_image(spec(cid=1), 3, seed=7).tobytes() != a.tobytes()


def test_render_order_independent():
    batch = render_batch(spec(), [5, 2, 9], seed=1)
    assert batch[1].tobytes() == render_image(spec(), 2, seed=1).tobytes()


def test_render_shape_and_range():
    img = render_image(spec(), 0, seed=0)
    assert img.shape == (IMAGE_SIZE, IMAGE_SIZE)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_noiseless_two_value_foreground():
    """With zero noise a solid disk has exactly two pixel values."""
    img = render_image(spec(noise=0.0), 0, seed=0)
    assert set(np.unique(img)) == {0.0, 0.85}


def test_dotted_vs_speckle_matched_first_order_stats():
    """The two textures share the bright-pixel fraction (~25%), so mean
    intensity cannot distinguish them; only regularity can."""
    d = render_image(spec(texture="dotted", shape="square", noise=0.0), 0, 0)
    rng_fracs = []
    for i in range(20):
        s = render_image(spec(texture="speckle", shape="square", noise=0.0), i, 0)
        fg = s[s > 0]
        rng_fracs.append((fg == 0.85).mean())
    fg_d = d[d > 0]
    assert (fg_d == 0.85).mean() == pytest.approx(0.25, abs=0.06)
    assert np.mean(rng_fracs) == pytest.approx(0.25, abs=0.06)


def test_speckle_varies_across_samples_dotted_does_not():
    a = render_image(spec(texture="dotted", noise=0.0), 0, 0)
    b = render_image(spec(texture="dotted", noise=0.0), 1, 0)
    # dotted pattern is identical up to the +-1 pixel center jitter
    assert np.abs(a.mean() - b.mean()) < 0.02
    s0 = render_image(spec(texture="speckle", noise=0.0), 0, 0)
    s1 = render_image(spec(texture="speckle", noise=0.0), 1, 0)
    assert (s0 != s1).sum() > 10  # random texture differs per sample


def test_unknown_attribute_rejected():
    with pytest.raises(ConfigError):
        SyntheticClassSpec(0, "plaid", "disk", "center")


def test_location_stump_recovers_location():
    """A fixed quadrant-mean rule decodes the location factor with high
    accuracy, confirming location is visually expressed."""
    correct = 0
    total = 0
    for loc in ("center", "upper left", "upper right", "lower left", "lower right"):
        imgs = render_batch(spec(location=loc, texture="solid"), range(40), seed=3)
        pred = stump_location(imgs)
        correct += (pred == loc).sum()
        total += len(pred)
    assert correct / total >= 0.99


def test_quadrant_means_shape():
    imgs = render_batch(spec(), range(3), seed=0)
    assert quadrant_means(imgs).shape == (3, 4)


# ---------------------------------------------------------------------------
# scenario assembly
# ---------------------------------------------------------------------------


def small_config(**kw):
    base = dict(pretrain_pairs_per_class=30, adapt_samples_per_group=40)
    base.update(kw)
    return ScenarioConfig(**base)


def test_new_scenario_excludes_target_texture_from_pretraining():
    sc = generate_scenario(small_config(kind="new"))
    assert all(s.texture != "speckle" for s in sc.pretrain_specs)


def test_underrepresented_share_bounded():
    sc = generate_scenario(ScenarioConfig(kind="underrepresented",
                                          pretrain_pairs_per_class=500,
                                          adapt_samples_per_group=40,
                                          underrepresented_pairs=14))
    n_target = sum((np.array([s.texture for s in sc.pretrain_specs])
                    == "speckle")[sc.pretrain_class_ids].sum()
                   for _ in [0])
    share = n_target / len(sc.pretrain_class_ids)
    assert 0 < share <= 0.005
    with pytest.raises(ConfigError):
        generate_scenario(ScenarioConfig(kind="underrepresented",
                                         pretrain_pairs_per_class=30,
                                         underrepresented_pairs=100))


def test_split_ratios_7_1_2():
    sc = generate_scenario(small_config())
    n = 40 * 4
    assert len(sc.split.train) == round(0.7 * 40) * 4
    assert len(sc.split.val) == round(0.1 * 40) * 4
    assert len(sc.split.train) + len(sc.split.val) + len(sc.split.test) == n


def test_split_no_leakage_between_parts():
    sc = generate_scenario(small_config())
    seen = set()
    for part in (sc.split.train, sc.split.val, sc.split.test):
        for img in part.images:
            key = img.tobytes()
            assert key not in seen
            seen.add(key)


def test_split_deterministic_byte_for_byte():
    a = generate_scenario(small_config())
    b = generate_scenario(small_config())
    assert a.split.train.images.tobytes() == b.split.train.images.tobytes()
    assert np.array_equal(a.split.test.labels, b.split.test.labels)
    c = generate_scenario(small_config(data_seed=999))
    assert a.split.train.images.tobytes() != c.split.train.images.tobytes()


def test_labels_match_prototype_class_map():
    sc = generate_scenario(small_config())
    for part in (sc.split.train, sc.split.val, sc.split.test):
        assert np.array_equal(part.labels,
                              sc.prototype_class_map[part.prototype_ids])


def test_task_is_binary_with_two_prototypes_per_class():
    sc = generate_scenario(small_config())
    assert sc.n_classes == 2
    assert len(sc.adapt_specs) == 4
    assert sorted(sc.prototype_class_map.tolist()) == [0, 0, 1, 1]


# ---------------------------------------------------------------------------
# few-shot subsampling
# ---------------------------------------------------------------------------


def test_subsample_exact_count_and_stratification():
    sc = generate_scenario(ScenarioConfig(pretrain_pairs_per_class=30,
                                          adapt_samples_per_group=300))
    sub = subsample_few_shot(sc.split.train, 0.05, seed=0)
    assert len(sub) == round(0.05 * 840)  # 42
    counts = np.bincount(sub.prototype_ids, minlength=4)
    assert counts.min() >= 1 and counts.max() - counts.min() <= 1


def test_subsample_deterministic_and_seed_sensitive():
    sc = generate_scenario(small_config())
    a = subsample_few_shot(sc.split.train, 0.2, seed=1)
    b = subsample_few_shot(sc.split.train, 0.2, seed=1)
    assert a.images.tobytes() == b.images.tobytes()
    c = subsample_few_shot(sc.split.train, 0.2, seed=2)
    assert a.images.tobytes() != c.images.tobytes()


def test_subsample_rows_come_from_train():
    sc = generate_scenario(small_config())
    train_keys = {img.tobytes() for img in sc.split.train.images}
    sub = subsample_few_shot(sc.split.train, 0.1, seed=0)
    assert all(img.tobytes() in train_keys for img in sub.images)


def test_subsample_too_small_fraction_names_minimum():
    sc = generate_scenario(small_config())
    with pytest.raises(ConfigError, match="minimum fraction"):
        subsample_few_shot(sc.split.train, 0.001, seed=0)


def test_default_specs_cover_intended_textures():
    pre = default_pretrain_specs()
    adapt = default_adaptation_specs()
    assert len(pre) == 6 and len(adapt) == 4
    assert {s.texture for s in adapt} == {"speckle", "dotted"}
    # matched confounds: same shapes/locations on both sides of the task
    targets = [(s.shape, s.location) for s in adapt if s.texture == "speckle"]
    benigns = [(s.shape, s.location) for s in adapt if s.texture == "dotted"]
    assert sorted(targets) == sorted(benigns)
