import numpy as np
import pytest

from robustlens.attacks import perturbation_norms
from robustlens.exceptions import ConfigError, DimensionError
from robustlens.featureviz import (VizObjective, VizSettings, class_mvn_sources, class_specific_generation,
                                   direct_feature_vis, mvn_fit, mvn_sample, random_noise_sources,
                                   representation_inversion, top_activating_images)
from robustlens.models import build, predict_logits, predict_representation

FAST = VizSettings(epsilon=5.0, step_size=0.2, iterations=15)


def test_objective_requires_exact_fields():
    VizObjective("activation_max", unit=1)
    with pytest.raises(ConfigError):
        VizObjective("activation_max", unit=1, target_class=0)
    with pytest.raises(ConfigError):
        VizObjective("class_logit_max")
    with pytest.raises(ConfigError):
        VizObjective("activation_max", unit=0, source="anything")


def test_settings_validated():
    with pytest.raises(ConfigError):
        VizSettings(epsilon=0.0)
    with pytest.raises(ConfigError):
        VizSettings(norm="l1")


def test_feature_vis_ascends_and_stays_feasible(tiny_params, rng):
    src = rng.uniform(size=(3, 3, 8, 8))
    run = direct_feature_vis(tiny_params, src, unit=2, settings=FAST)
    assert run.trace.shape == (16, 3)
    assert np.all(run.final >= run.initial)
    np.testing.assert_array_equal(run.final, run.trace.max(axis=0))
    assert np.all(perturbation_norms(run.images - src, "l2") <= 5.0 + 1e-6)
    assert run.images.min() >= 0.0 and run.images.max() <= 1.0
    np.testing.assert_allclose(predict_representation(tiny_params, run.images)[:, 2], run.final, rtol=1e-9)


def test_singleton_set_matches_single_unit(tiny_params, rng):
    src = rng.uniform(size=(2, 3, 8, 8))
    a = direct_feature_vis(tiny_params, src, unit=5, settings=FAST)
    b = direct_feature_vis(tiny_params, src, units=[5], settings=FAST)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.trace.tobytes() == b.trace.tobytes()


def test_unit_range_checked(tiny_params):
    with pytest.raises(ConfigError):
        direct_feature_vis(tiny_params, np.zeros((3, 8, 8)), unit=8)
    with pytest.raises(ConfigError):
        direct_feature_vis(tiny_params, np.zeros((3, 8, 8)), unit=1, units=[1])


def test_dead_unit_is_flagged(tiny_params):
    params = tiny_params.copy()
    # zeroing the branch scale and shift of the last block leaves a unit that is relu(skip) only;
    # a negative bias on the shortcut BN kills it for inputs in [0, 1]
    params["stage1.block0.shortcut.bn.gamma"].data[0] = 0.0
    params["stage1.block0.shortcut.bn.beta"].data[0] = -50.0
    params["stage1.block0.bn2.gamma"].data[0] = 0.0
    params["stage1.block0.bn2.beta"].data[0] = 0.0
    run = direct_feature_vis(params, np.full((1, 3, 8, 8), 0.5), unit=0, settings=FAST)
    assert run.stagnant.tolist() == [True]
    assert run.final[0] == 0.0


def test_inversion_from_target_stays_at_zero(tiny_params, rng):
    x = rng.uniform(size=(2, 3, 8, 8))
    run = representation_inversion(tiny_params, x, x, FAST)
    assert np.all(run.final <= 1e-6)


def test_inversion_descends(tiny_params, rng):
    src = rng.uniform(size=(3, 3, 8, 8))
    targ = rng.uniform(size=(3, 3, 8, 8))
    run = representation_inversion(tiny_params, src, targ, FAST)
    assert np.all(run.final < run.initial)
    np.testing.assert_array_equal(run.final, run.trace.min(axis=0))
    with pytest.raises(DimensionError):
        representation_inversion(tiny_params, src, targ[:2], FAST)


def test_inversion_rejects_zero_target(tiny_params):
    params = tiny_params.copy()
    params["stage1.block0.shortcut.bn.gamma"].data[:] = 0.0
    params["stage1.block0.shortcut.bn.beta"].data[:] = -50.0
    params["stage1.block0.bn2.gamma"].data[:] = 0.0
    params["stage1.block0.bn2.beta"].data[:] = 0.0
    with pytest.raises(ConfigError):
        representation_inversion(params, np.zeros((1, 3, 8, 8)), np.full((1, 3, 8, 8), 0.5), FAST)


def test_class_generation_raises_logit_and_is_seeded(tiny_params, rng):
    src = rng.uniform(size=(4, 3, 8, 8))
    run = class_specific_generation(tiny_params, 1, src, FAST)
    assert np.all(run.final >= run.initial)
    np.testing.assert_allclose(predict_logits(tiny_params, run.images)[:, 1], run.final, rtol=1e-9)
    again = class_specific_generation(tiny_params, 1, src, FAST)
    assert again.images.tobytes() == run.images.tobytes()
    with pytest.raises(ConfigError):
        class_specific_generation(tiny_params, 3, src, FAST)


def test_linf_ball_respected(tiny_params, rng):
    src = rng.uniform(0.2, 0.8, size=(2, 3, 8, 8))
    cfg = VizSettings(norm="linf", epsilon=0.05, step_size=0.02, iterations=10)
    run = class_specific_generation(tiny_params, 0, src, cfg)
    assert np.all(np.abs(run.images - src) <= 0.05 + 1e-6)


def test_trained_unit_visualisation_beats_test_percentile(trained_tiny):
    params, data = trained_tiny
    acts = predict_representation(params, data.images)
    unit = int(np.argmax(acts.var(axis=0)))
    run = direct_feature_vis(params, data.images[:1], unit=unit,
                             settings=VizSettings(epsilon=1000.0, step_size=1.0, iterations=100))
    assert run.final[0] > np.percentile(acts[:, unit], 99)


def test_trained_class_generation_is_recognised(trained_tiny):
    params, data = trained_tiny
    hits = 0
    for c in range(4):
        src = class_mvn_sources(data.images, data.labels, c, 25, seed=c)
        run = class_specific_generation(params, c, src)
        hits += int((predict_logits(params, run.images).argmax(1) == c).sum())
    assert hits >= 90


def test_top_activating_images():
    from robustlens.models import NetworkSpec
    params = build(NetworkSpec(input_shape=(3, 4, 4), num_classes=2, widths=(4,), blocks=(1,)), 0)
    acts = np.array([0.5, 2.0, 2.0, -1.0, 0.1])
    imgs = np.zeros((5, 3, 4, 4), np.float32)
    top, bottom = top_activating_images(params, imgs, 0, count=2, activations=acts)
    assert top.tolist() == [1, 2] and bottom.tolist() == [3, 4]
    top1, bottom1 = top_activating_images(params, imgs, 0, count=1, activations=acts)
    assert top1.tolist() == [1] and bottom1.tolist() == [3]
    # reordering the dataset does not change the ranking of ids
    perm = np.array([4, 2, 0, 3, 1])
    t, b = top_activating_images(params, imgs[perm], 0, count=2, ids=perm, activations=acts[perm])
    assert t.tolist() == [1, 2] and b.tolist() == [3, 4]


def test_mvn_identical_images_collapse_to_mean():
    img = np.random.default_rng(0).uniform(size=(3, 4, 4))
    stats = mvn_fit(np.stack([img] * 5))
    # the mean of identical floats can be off by an ulp, so only roundoff survives
    assert np.abs(stats.cov).max() <= 1e-30
    out = mvn_sample(stats, seed=1, count=3, shape=img.shape, ridge=0.0)
    np.testing.assert_allclose(out, np.broadcast_to(img, out.shape), atol=1e-15)


def test_mvn_hand_example():
    stats = mvn_fit(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    np.testing.assert_allclose(stats.mean, [1.0, 1.0])
    np.testing.assert_allclose(stats.cov, np.full((2, 2), 2 / 3))


def test_mvn_needs_two_images():
    with pytest.raises(ValueError):
        mvn_fit(np.zeros((1, 3, 2, 2)))


def test_mvn_sample_mean_clt(rng):
    data = rng.normal(size=(50, 4)) @ rng.normal(size=(4, 4))
    stats = mvn_fit(data)
    n = 10000
    draws = mvn_sample(stats, seed=3, count=n, clip=None)
    sigma = np.sqrt(np.diag(stats.cov))
    assert np.all(np.abs(draws.mean(axis=0) - stats.mean) <= 4 * sigma / np.sqrt(n))
    np.testing.assert_allclose(np.cov(draws.T, bias=True), stats.cov, atol=0.1 * np.abs(stats.cov).max())


def test_sources_are_seeded_and_in_range(rng):
    imgs = rng.uniform(size=(20, 3, 4, 4)).astype(np.float32)
    labels = np.repeat([0, 1], 10)
    a = class_mvn_sources(imgs, labels, 1, 6, seed=2)
    assert a.shape == (6, 3, 4, 4) and a.min() >= 0 and a.max() <= 1
    assert a.tobytes() == class_mvn_sources(imgs, labels, 1, 6, seed=2).tobytes()
    noise = random_noise_sources((3, 4, 4), 5, seed=1)
    assert noise.shape == (5, 3, 4, 4) and noise.tobytes() == random_noise_sources((3, 4, 4), 5, seed=1).tobytes()
