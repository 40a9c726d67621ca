import math

import numpy as np
import pytest

from fusesplat.cma import cma_forward
from fusesplat.exceptions import InvalidParameterError, ShapeError, TrainingError
from fusesplat.losses import reconstruction_loss
from fusesplat.optimizer import (
    AdamState,
    DensifyThresholds,
    GradStats,
    TrainConfig,
    ViewSampler,
    adam_step,
    densify_and_prune,
    exponential_lr,
    initialize_scene,
    scene_extent,
    smoothed,
    train_stage1,
    train_stage2,
)
from fusesplat.rasterizer import render, render_backward, render_fused, render_single
from fusesplat.scene import Modality, MultimodalScene, sigmoid

from _helpers import random_gset

# --- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(3)}, state, 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])
    assert state.step == 1


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -1e-3, 250.0, -7.0])
    p = {"w": np.zeros(4)}
    adam_step(p, {"w": g}, AdamState(), 0.01)
    # After bias correction m/sqrt(v) = g/|g|.
    np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), rtol=1e-10)


def test_adam_second_step_closed_form():
    g1, g2 = 2.0, -1.0
    p = {"w": np.zeros(1)}
    st = AdamState()
    adam_step(p, {"w": np.array([g1])}, st, 1.0)
    adam_step(p, {"w": np.array([g2])}, st, 1.0)
    m = (0.1 * 0.9 * g1 + 0.1 * g2) / (1 - 0.9**2)
    v = (0.001 * 0.999 * g1**2 + 0.001 * g2**2) / (1 - 0.999**2)
    assert p["w"][0] == pytest.approx(-1.0 - m / (math.sqrt(v) + 1e-15), rel=1e-12)


def test_adam_per_group_rates_and_shape_check():
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    adam_step(p, {"a": np.ones(2), "b": np.ones(2)}, AdamState(), {"a": 0.1, "b": 0.5})
    np.testing.assert_allclose(p["a"], -0.1)
    np.testing.assert_allclose(p["b"], -0.5)
    with pytest.raises(ShapeError):
        adam_step(p, {"a": np.ones(3), "b": np.ones(2)}, AdamState(), 0.1)


def test_adam_deterministic(rng):
    grads = [rng.normal(size=(5, 3)) for _ in range(20)]
    results = []
    for _ in range(2):
        p = {"w": np.ones((5, 3))}
        st = AdamState()
        for g in grads:
            adam_step(p, {"w": g}, st, 0.05)
        results.append(p["w"].tobytes())
    assert results[0] == results[1]


def test_exponential_lr_endpoints():
    assert exponential_lr(0, 100, 1e-2, 1e-4) == pytest.approx(1e-2)
    assert exponential_lr(50, 100, 1e-2, 1e-4) == pytest.approx(1e-3)
    assert exponential_lr(500, 100, 1e-2, 1e-4) == pytest.approx(1e-4)


def test_config_validation():
    with pytest.raises(InvalidParameterError):
        TrainConfig(stage1_iters=0)
    with pytest.raises(InvalidParameterError):
        TrainConfig(lr_cma=0.0)
    c = TrainConfig()
    assert (c.stage1_iters, c.stage2_iters, c.lambda1, c.lambda2) == (15000, 15000, 1.0, 2.0)
    assert c.densify_stop == 7500


# --- densification ----------------------------------------------------------


def stats_with(grads):
    s = GradStats.zeros(len(grads))
    s.accum[:] = grads
    s.denom[:] = 1.0
    return s


def test_densify_nothing_above_threshold(rng):
    g = random_gset(rng, 6, opacity=(0.3, 0.9))
    out, keep, n_new = densify_and_prune(g, stats_with(np.full(6, 1e-5)), DensifyThresholds(grad=1e-3), rng)
    assert out.equals(g) and n_new == 0
    np.testing.assert_array_equal(keep, np.arange(6))


def test_clone_preserves_everything_but_position(rng):
    g = random_gset(rng, 4, modality=Modality.INFRARED, scale=(0.001, 0.002), opacity=(0.3, 0.9))
    grads = np.array([0.0, 1.0, 0.0, 0.0])
    th = DensifyThresholds(grad=0.5, percent_dense=0.01, scene_extent=1.0)
    out, keep, n_new = densify_and_prune(g, stats_with(grads), th, rng)
    assert n_new == 1 and len(out) == 5
    assert np.all(out.modality == Modality.INFRARED)
    clone = out.subset([4])
    src = g.subset([1])
    for name in ("quats", "log_scales", "opacity_logits", "sh"):
        np.testing.assert_array_equal(getattr(clone, name), getattr(src, name))
    shift = np.linalg.norm(clone.means - src.means)
    assert 0 < shift < 10 * 0.05 * np.exp(src.log_scales).max()


def test_split_replaces_large_primitive(rng):
    g = random_gset(rng, 3, scale=(0.2, 0.3), opacity=(0.3, 0.9))
    grads = np.array([1.0, 0.0, 0.0])
    out, keep, n_new = densify_and_prune(g, stats_with(grads), DensifyThresholds(grad=0.5), rng)
    np.testing.assert_array_equal(keep, [1, 2])
    assert n_new == 2 and len(out) == 4
    for child in (out.subset([2]), out.subset([3])):
        np.testing.assert_allclose(child.log_scales, g.log_scales[:1] - math.log(1.6), rtol=1e-12)
        np.testing.assert_array_equal(child.sh, g.sh[:1])


def test_prune_removes_transparent(rng):
    g = random_gset(rng, 50, opacity=(0.0001, 0.02))
    out, _, _ = densify_and_prune(g, stats_with(np.zeros(50)), DensifyThresholds(prune_opacity=0.005), rng)
    assert 0 < len(out) < 50
    assert sigmoid(out.opacity_logits).min() >= 0.005


def test_densify_respects_budget(rng):
    g = random_gset(rng, 10, scale=(0.001, 0.002), opacity=(0.5, 0.9))
    grads = np.linspace(1, 2, 10)
    out, _, n_new = densify_and_prune(g, stats_with(grads), DensifyThresholds(grad=0.5, max_gaussians=13), rng)
    assert len(out) == 13 and n_new == 3
    # The largest gradients win.
    np.testing.assert_array_equal(out.sh[10:], g.sh[7:])


def test_adam_state_follows_rows():
    st = AdamState(m={"w": np.arange(4.0)[:, None]}, v={"w": np.ones((4, 1))})
    st.select_rows(np.array([0, 2]), 3)
    np.testing.assert_array_equal(st.m["w"][:, 0], [0, 2, 0, 0, 0])
    assert st.v["w"].shape == (5, 1)


def test_view_sampler_is_a_permutation_per_epoch(rng):
    s = ViewSampler(5, rng)
    for _ in range(3):
        assert sorted(next(s) for _ in range(5)) == list(range(5))


def test_smoothed_is_trailing_mean():
    x = np.arange(10.0)
    np.testing.assert_allclose(smoothed(x, 3), [0, 0.5, 1, 2, 3, 4, 5, 6, 7, 8])


# --- stage 1 ----------------------------------------------------------------


def fast_config(**kw):
    base = dict(stage1_iters=60, stage2_iters=40, densify_from=20, densify_interval=20, densify_until=50,
                densify_grad_threshold=1e-3, max_gaussians=60, n_init_points=20, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def train_data(synthetic_small):
    return synthetic_small[0].load("train")


@pytest.fixture(scope="module")
def stage1_run(train_data):
    cfg = fast_config(stage1_iters=1200, densify_from=100, densify_interval=100, densify_until=600,
                      densify_grad_threshold=5e-4, max_gaussians=80)
    return cfg, train_stage1(train_data, cfg)


def test_stage1_smoothed_loss_trends_down(stage1_run):
    _, res = stage1_run
    curve = smoothed([r["loss"] for r in res.history], 100)
    for k in range(100, len(curve) - 500, 100):
        assert curve[k + 500] <= curve[k], k


def test_stage1_gamma_tracks_counts(stage1_run):
    _, res = stage1_run
    counts = {(r["n_visible"], r["n_infrared"]) for r in res.history}
    assert len(counts) > 1, "densification never changed the counts"
    for r in res.history:
        assert r["gamma"] == r["n_infrared"] / (r["n_visible"] + r["n_infrared"])
    assert (res.scene.n_visible, res.scene.n_infrared) == (res.history[-1]["n_visible"], res.history[-1]["n_infrared"])


def test_stage1_improves_psnr(stage1_run):
    _, res = stage1_run
    first = np.mean([r["psnr_visible"] for r in res.history[:20]])
    last = np.mean([r["psnr_visible"] for r in res.history[-20:]])
    assert last > first + 5


def test_stage1_deterministic(train_data):
    a = train_stage1(train_data, fast_config()).scene
    b = train_stage1(train_data, fast_config()).scene
    assert a.equals(b)
    assert a.visible.means.tobytes() == b.visible.means.tobytes()


def test_stage1_rejects_empty_dataset(train_data):
    with pytest.raises(TrainingError):
        train_stage1(train_data.subset([]), fast_config())


def test_init_places_points_near_focus(train_data):
    scene = initialize_scene(train_data, fast_config(), np.random.default_rng(0))
    assert scene.n_visible == scene.n_infrared == 20
    np.testing.assert_array_equal(scene.visible.means, scene.infrared.means)
    assert np.abs(scene.visible.means).max() < 2.0
    assert scene_extent(train_data.cameras) > 0


def _independent_adam_run(gset, data, config, n_iters, lr_scale):
    """Single-modality loop written directly on the renderer: no densification."""
    from fusesplat.optimizer import GAUSSIAN_GROUPS, _gaussian_grads, _gaussian_lrs

    gset = gset.copy()
    sampler = ViewSampler(len(data), np.random.default_rng(config.seed))
    state = AdamState()
    targets = data.visible if gset.modality[0] == Modality.VISIBLE else data.infrared
    extent = scene_extent(data.cameras)
    for it in range(n_iters):
        k = next(sampler)
        out = render(gset, data.cameras[k])
        loss = reconstruction_loss(targets[k], out.image)
        grads = render_backward(gset, data.cameras[k], loss.d_image, None, out, geometry=True)
        lrs = {n: r * lr_scale for n, r in _gaussian_lrs(config, it, extent).items()}
        adam_step({n: getattr(gset, n) for n in GAUSSIAN_GROUPS}, _gaussian_grads(grads), state, lrs)
    return gset


def test_gamma_weighting_factorizes_under_adam(train_data):
    rng = np.random.default_rng(8)
    start = MultimodalScene(random_gset(rng, 8, spread=0.5, modality=Modality.VISIBLE),
                            random_gset(rng, 4, spread=0.5, modality=Modality.INFRARED))
    gamma = 4 / 12  # infrared share weights the visible term
    n = 30
    cfg = fast_config(stage1_iters=n, densify_interval=0)
    joint = train_stage1(train_data, cfg, scene=start).scene

    def final_loss(gset, targets):
        return np.mean([reconstruction_loss(t, render(gset, c).image).value
                        for c, t in zip(train_data.cameras, targets)])

    for part, init, targets, w in ((joint.visible, start.visible, train_data.visible, gamma),
                                   (joint.infrared, start.infrared, train_data.infrared, 1 - gamma)):
        alone = _independent_adam_run(init, train_data, cfg, n, 1.0)
        assert abs(final_loss(part, targets) - final_loss(alone, targets)) <= 1e-3
        # Adam divides out a constant gradient weight, so scaling the rate by it is not equivalent.
        scaled = _independent_adam_run(init, train_data, cfg, n, w)
        assert np.abs(scaled.means - part.means).max() > np.abs(alone.means - part.means).max()


# --- stage 2 ----------------------------------------------------------------


def test_stage2_keeps_gaussians_frozen(train_data, synthetic_small):
    scene = synthetic_small[1].scene
    before = [getattr(s, n).tobytes() for s in (scene.visible, scene.infrared)
              for n in ("means", "quats", "log_scales", "opacity_logits", "sh")]
    res = train_stage2(scene, train_data, fast_config())
    after = [getattr(s, n).tobytes() for s in (res.scene.visible, res.scene.infrared)
             for n in ("means", "quats", "log_scales", "opacity_logits", "sh")]
    assert before == after
    assert len(res.history) == 40


def test_stage2_deterministic(train_data, synthetic_small):
    scene = synthetic_small[1].scene
    a = train_stage2(scene, train_data, fast_config()).params
    b = train_stage2(scene, train_data, fast_config()).params
    assert a.equals(b)


def test_stage2_identical_modalities_reduce_to_single(train_data, synthetic_small):
    # Both modalities hold the exact reconstruction of the same images.
    gt = synthetic_small[1].scene.visible
    twin = gt.copy()
    twin.modality = np.full(len(twin), int(Modality.INFRARED), dtype=np.int8)
    scene = MultimodalScene(gt, twin)
    data = train_data.subset(range(len(train_data)))
    data.infrared = list(data.visible)
    res = train_stage2(scene, data, fast_config(stage2_iters=300))
    tau = cma_forward(res.params, scene)
    for cam in data.cameras:
        fused = render_fused(scene, cam, tau).image
        single = render_single(gt, cam).image
        assert np.abs(fused - single).mean() <= 0.05


def test_stage2_joint_finetune_changes_appearance_only(train_data, synthetic_small):
    scene = synthetic_small[1].scene
    res = train_stage2(scene, train_data, fast_config(joint_finetune=True, stage2_iters=5))
    assert res.scene.visible.means.tobytes() == scene.visible.means.tobytes()
    assert not np.array_equal(res.scene.visible.sh, scene.visible.sh)


def test_stage2_checks_network_width(train_data, synthetic_small):
    from fusesplat.cma import cma_init

    with pytest.raises(ShapeError):
        train_stage2(synthetic_small[1].scene, train_data, fast_config(), params=cma_init(0, 48))
