import numpy as np
import pytest

from fisheye_bev.gradcheck import e2e_gradcheck
from fisheye_bev.synth import make_dataset
from fisheye_bev.toy import (ToyConfig, ToyParams, TrainingDivergedError, build_cache, evaluate_scenes,
                             predict_raster, table_step_scale, toy_train)


@pytest.fixture(scope="module")
def scenes():
    return make_dataset([100, 101], stride=8)


def test_history_length_and_lr_zero(scenes):
    cfg = ToyConfig(learning_rate=0.0, iterations=3)
    r = toy_train(scenes[:1], cfg)
    assert len(r.history) == 4
    assert len({row[1] for row in r.history}) == 1
    init = ToyParams.init(4, cfg)
    assert np.array_equal(r.params.depth_table, init.depth_table)
    assert np.array_equal(r.params.bias, init.bias)


def test_initial_loss_uniform_logits(scenes):
    r = toy_train(scenes[:1], ToyConfig(iterations=0))
    # zero features and zero bias give uniform class probabilities
    assert r.history[0][1] == pytest.approx(np.log(3) * np.mean(
        (scenes[0].labels.onehot * np.array(r.weights.weights)).sum(-1)), rel=1e-12)


def test_single_scene_loss_decreases(scenes):
    r = toy_train(scenes[:1], ToyConfig(iterations=10))
    losses = [row[1] for row in r.history]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_deterministic_across_threads(scenes):
    hist = [toy_train(scenes, ToyConfig(iterations=3, threads=t)).history for t in (1, 2, 8)]
    assert repr(hist[0]) == repr(hist[1]) == repr(hist[2])


def test_divergence_reported(scenes):
    with pytest.raises(TrainingDivergedError) as err:
        toy_train(scenes[:1], ToyConfig(learning_rate=1e300, iterations=5))
    assert err.value.iteration >= 1


def test_step_scale(scenes):
    cfg = ToyConfig()
    caches = [build_cache(b, cfg) for b in scenes]
    params = ToyParams.init(4, cfg)
    scale = table_step_scale(params, caches)
    assert scale.shape == params.depth_table.shape[:-1]
    flat = scale.ravel()
    counts = sum(np.bincount(c.codes, minlength=flat.size) for c in caches) / 2
    used = counts > 0
    np.testing.assert_allclose(flat[used] * counts[used], 64 * 48)
    assert not flat[~used].any()


def test_predict_raster_and_eval(scenes):
    cfg = ToyConfig(iterations=2)
    r = toy_train(scenes[:1], cfg)
    raster = predict_raster(r.params, build_cache(scenes[1], cfg), cfg)
    assert raster.features.shape == (48, 64, 3) and np.all(raster.mass >= 0)
    loss, ious = evaluate_scenes(r.params, scenes[1:], cfg, r.weights)
    assert np.isfinite(loss) and ious.shape == (3,)


def test_end_to_end_gradient():
    assert e2e_gradcheck(seed=1) < 1e-3


def test_per_camera_fields(scenes):
    cfg = ToyConfig(iterations=1)
    r = toy_train(scenes[:1], cfg)
    fields = r.per_camera_fields(build_cache(scenes[0], cfg))
    assert len(fields) == 4
    depth, feats, sigma = fields[0]
    lut = scenes[0].luts[0]
    assert depth.shape == (lut.height, lut.width, 64) and feats.shape[-1] == 3
    assert np.all(sigma == cfg.sigma)
