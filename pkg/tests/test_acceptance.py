"""Acceptance criteria, each checked at its stated tolerance.

Every test records a one-line PASS/FAIL summary that is printed in the
terminal summary (and immediately, with output capture disabled).
"""

import time

import numpy as np
import pytest

from fusesplat.cma import cma_backward, cma_forward, cma_init
from fusesplat.dataio import generate_synthetic
from fusesplat.geometry import Camera, look_at
from fusesplat.losses import (
    FusionTargets,
    fusion_gradient_loss,
    l1_loss,
    reconstruction_loss,
    ssim,
    stage1_loss,
    stage2_loss,
)
from fusesplat.metrics import evaluate_fused, psnr
from fusesplat.optimizer import TrainConfig, reconstruction_psnr, smoothed, train_stage1, train_stage2
from fusesplat.rasterizer import compositing_weight_sum, render, render_backward, render_fused, render_single
from fusesplat.reference import composite_state, render_reference
from fusesplat.scene import Modality, MultimodalScene, concat_modalities

from _helpers import central_diff, fd_compare, make_camera, random_gset, random_scene
from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.slow


def record(capsys, number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    with capsys.disabled():
        print("\n" + line)
    return ok


# --- 1: compositing oracle ----------------------------------------------------


def test_criterion_1_compositing_oracle(capsys):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        scene = random_scene(rng, int(rng.integers(1, 25)), int(rng.integers(1, 25)), opacity=(0.05, 0.99))
        cam = make_camera(width=32, height=24, eye=rng.uniform(-1, 1, 3) + [0, 0, -3])
        tau = rng.uniform(0, 1, len(scene))
        tiled = render_fused(scene, cam, tau).image
        ref, _ = render_reference(concat_modalities(scene), cam, tau)
        worst = max(worst, float(np.abs(tiled - ref).max()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 10
    record(capsys, 1, ok, f"50 scenes, max |tiled - naive| = {worst:.2e} (<= 1e-5), {elapsed:.2f} s (< 10 s)")
    assert ok


# --- 2: gradient suite --------------------------------------------------------


def test_criterion_2_gradients(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    scene = random_scene(rng, 10, 10, opacity=(0.2, 0.95))
    g = concat_modalities(scene)
    cam = make_camera(width=32, height=32)
    tau = rng.uniform(0.2, 1.0, len(g))
    R = rng.normal(size=(32, 32, 3))

    def loss():
        return float(np.sum(render(g, cam, tau).image * R))

    def state():
        return composite_state(g, cam, tau)

    grads = render_backward(g, cam, R, tau)
    raster = {}
    for name, x, an in (("color", g.sh, grads.d_sh), ("opacity_logit", g.opacity_logits, grads.d_opacity_logit),
                        ("tau", tau, grads.d_tau)):
        err, n = fd_compare(loss, x, an, 1e-4, state=state)
        assert n >= 0.8 * x.size
        raster[name] = err

    p = cma_init(5, g.sh_flat.shape[1], 16, 16)
    p.b1 = rng.normal(0, 0.3, 16)
    p.ln2_gain = rng.uniform(0.5, 1.5, 16)
    X = rng.normal(size=(8, p.d_c))
    w = rng.normal(size=8)
    cma_grads, dX = cma_backward(p, X, w, return_input_grad=True)
    mlp = 0.0
    for name, arr in [*p.arrays().items(), ("input", X)]:
        an = dX if name == "input" else getattr(cma_grads, name)
        fd = central_diff(lambda: float(np.sum(cma_forward(p, X) * w)), arr, 1e-6)
        mlp = max(mlp, float(np.max(np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-8))))
    elapsed = time.perf_counter() - t0
    worst_r = max(raster.values())
    ok = worst_r <= 1e-4 and mlp <= 1e-5 and elapsed < 60
    parts = ", ".join(f"{k} {v:.1e}" for k, v in raster.items())
    record(capsys, 2, ok, f"rasterizer rel err ({parts}) <= 1e-4; MLP rel err {mlp:.1e} <= 1e-5; {elapsed:.1f} s (< 60 s)")
    assert ok


# --- 3: degeneracies ----------------------------------------------------------


def test_criterion_3_tau_degeneracies(capsys):
    rng = np.random.default_rng(3)
    exact, worst = True, 0.0
    for _ in range(10):
        scene = random_scene(rng, 12, 9)
        cam = make_camera()
        n = len(scene)
        exact &= render_fused(scene, cam, np.ones(n)).image.tobytes() == \
            render_single(concat_modalities(scene), cam).image.tobytes()
        vis_only = render_fused(scene, cam, np.r_[np.ones(12), np.zeros(9)]).image
        ir_only = render_fused(scene, cam, np.r_[np.zeros(12), np.ones(9)]).image
        worst = max(worst, np.abs(vis_only - render_single(scene.visible, cam).image).max(),
                    np.abs(ir_only - render_single(scene.infrared, cam).image).max())
    ok = exact and worst <= 1e-6
    record(capsys, 3, ok, f"tau=1 bit-identical to concatenated render: {exact}; "
                          f"tau=0 on one modality vs solo render max diff {worst:.1e} (<= 1e-6)")
    assert ok


# --- 4: partition of unity ----------------------------------------------------


def test_criterion_4_partition_of_unity(capsys):
    worst = 0.0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        scene = random_scene(rng, 15, 15, opacity=(0.05, 0.99))
        out = render_fused(scene, make_camera(), rng.uniform(0, 1, 30))
        worst = max(worst, float(np.abs(compositing_weight_sum(out) + out.transmittance - 1).max()))
    ok = worst <= 1e-5
    record(capsys, 4, ok, f"max |sum w + T_final - 1| = {worst:.1e} over 30 scenes (<= 1e-5)")
    assert ok


# --- 5: loss oracles ----------------------------------------------------------


def _fd_rel(f, x, an, eps):
    fd = central_diff(f, x, eps)
    floor = max(1e-3 * np.abs(an).max(), 1e-12)
    return float(np.max(np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)))


def test_criterion_5_loss_oracles(capsys):
    rng = np.random.default_rng(5)
    x, y, z = (rng.uniform(size=(16, 16, 3)) for _ in range(3))
    checks = {}
    checks["ssim(x,x)=1"] = abs(ssim(x, x, with_grad=False)[0] - 1) <= 1e-12
    a = np.zeros((8, 8, 3))
    checks["psnr 1/255 = 48.13 dB"] = abs(psnr(a, a + 1 / 255) - 20 * np.log10(255)) <= 1e-6
    checks["stage2(V,V,V)=0"] = abs(stage2_loss(x, FusionTargets(x, x)).value) <= 1e-12
    tg = FusionTargets(y, z)
    checks["l1 FD"] = _fd_rel(lambda: l1_loss(x, y).value, x, l1_loss(x, y).d_image, 1e-7) <= 1e-6
    checks["ssim FD"] = _fd_rel(lambda: ssim(x, y, with_grad=False)[0], x, ssim(x, y)[1], 1e-6) <= 1e-4
    checks["stage1 FD"] = _fd_rel(lambda: reconstruction_loss(y, x).value, x,
                                  reconstruction_loss(y, x).d_image, 1e-6) <= 1e-4
    checks["gradient-loss FD"] = _fd_rel(lambda: fusion_gradient_loss(x, tg).value, x,
                                         fusion_gradient_loss(x, tg).d_image, 1e-5) <= 1e-5
    checks["stage2 FD"] = _fd_rel(lambda: stage2_loss(x, tg).value, x, stage2_loss(x, tg).d_image, 1e-6) <= 1e-4
    s1 = stage1_loss(y, x, z, x, 0.3)
    checks["stage1 gamma sum"] = abs(s1.value - (0.3 * s1.visible + 0.7 * s1.infrared)) <= 1e-9
    ok = all(checks.values())
    record(capsys, 5, ok, "; ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok


# --- 6 and 7: end-to-end synthetic regression ---------------------------------

# Stage-1 densification at this resolution uses a higher threshold and a
# primitive budget so that 3000 iterations fit in the time limit.
STAGE1 = dict(stage1_iters=3000, densify_grad_threshold=2e-3, max_gaussians=250, densify_from=200,
              densify_until=1500, seed=0)
STAGE2 = dict(stage2_iters=2000)


def _mean_stage2_loss(scene, params, data):
    tau = cma_forward(params, scene)
    return float(np.mean([stage2_loss(render_fused(scene, c, tau).image, FusionTargets(V, T)).value
                          for c, V, T in zip(data.cameras, data.visible, data.infrared)]))


def _ssim_avg(images, data):
    return float(np.mean([evaluate_fused(np.clip(F, 0, 1), V, T).ssim_avg
                          for F, V, T in zip(images, data.visible, data.infrared)]))


@pytest.fixture(scope="module")
def end_to_end(tmp_path_factory):
    t0 = time.perf_counter()
    index, _ = generate_synthetic(0, out_dir=tmp_path_factory.mktemp("fixture"))
    train, test = index.load("train"), index.load("test")
    cfg = TrainConfig(**STAGE1, **STAGE2)
    s1 = train_stage1(train, cfg)
    t1 = time.perf_counter()
    scene = s1.scene
    init_params = cma_init(cfg.seed, scene.d_c, *cfg.cma_hidden)
    s2 = train_stage2(scene, train, cfg)
    t2 = time.perf_counter()
    tau = cma_forward(s2.params, scene)
    res = {"stage1_psnr": reconstruction_psnr(scene, train), "stage1_seconds": t1 - t0,
           "stage2_seconds": t2 - t1, "history2": s2.history,
           "loss_init": _mean_stage2_loss(scene, init_params, train),
           "loss_final": _mean_stage2_loss(scene, s2.params, train)}
    for split, data in (("test", test), ("train", train)):
        cams = data.cameras
        res[split] = {
            "fused": _ssim_avg([render_fused(scene, c, tau).image for c in cams], data),
            "tau1": _ssim_avg([render_fused(scene, c, np.ones(len(scene))).image for c in cams], data),
            "visible": _ssim_avg([render_single(scene.visible, c).image for c in cams], data),
            "infrared": _ssim_avg([render_single(scene.infrared, c).image for c in cams], data),
        }
    res["total_seconds"] = time.perf_counter() - t0
    return res


def test_criterion_6_end_to_end(capsys, end_to_end):
    r = end_to_end
    pv, pt = r["stage1_psnr"]
    psnr_ok = pv >= 30 and pt >= 30
    curve = smoothed([h["loss"] for h in r["history2"]], 100)
    drop_smoothed = 1 - curve[-1] / curve[99]
    drop_allview = 1 - r["loss_final"] / r["loss_init"]
    drop_ok = drop_smoothed >= 0.30
    t = r["test"]
    dom_ok = t["fused"] >= max(t["visible"], t["infrared"])
    time_ok = r["total_seconds"] <= 15 * 60
    ok = psnr_ok and drop_ok and dom_ok and time_ok
    record(capsys, 6, ok,
           f"stage-1 train PSNR V {pv:.1f} / T {pt:.1f} dB (>= 30) {'ok' if psnr_ok else 'FAILED'}; "
           f"stage-2 smoothed loss drop {100 * drop_smoothed:.1f}% "
           f"(all-view mean {r['loss_init']:.4f} -> {r['loss_final']:.4f}, {100 * drop_allview:.1f}%) "
           f"(>= 30%) {'ok' if drop_ok else 'FAILED'}; "
           f"test ssim_avg fused {t['fused']:.4f} vs visible {t['visible']:.4f} / infrared {t['infrared']:.4f} "
           f"{'ok' if dom_ok else 'FAILED'}; runtime {r['total_seconds'] / 60:.1f} min (<= 15) "
           f"{'ok' if time_ok else 'FAILED'}")
    assert psnr_ok and dom_ok and time_ok
    assert drop_ok, (f"stage-2 loss drop {100 * drop_smoothed:.1f}% < 30%: with frozen primitives the "
                     "reachable loss floor is too close to the initial loss")


def test_criterion_7_ablation(capsys, end_to_end):
    t, tr = end_to_end["test"], end_to_end["train"]
    margin = t["fused"] - t["tau1"]
    ok = margin > 0
    record(capsys, 7, ok, f"test ssim_avg trained CMA {t['fused']:.4f} vs tau=1 {t['tau1']:.4f} "
                          f"(margin {margin:+.4f} > 0); train split {tr['fused']:.4f} vs {tr['tau1']:.4f}")
    assert ok


# --- 8: throughput ------------------------------------------------------------


def test_criterion_8_throughput(capsys):
    rng = np.random.default_rng(8)
    g = random_gset(rng, 10_000, spread=1.0, scale=(0.005, 0.03), opacity=(0.05, 0.6))
    f = 600.0
    cam = Camera(f, f, 320.0, 240.0, 640, 480, look_at(np.array([0.3, -0.2, -3.0]), np.zeros(3)))
    render(g, cam)  # compile and warm caches
    t0 = time.perf_counter()
    tiled = render(g, cam).image
    t_tiled = time.perf_counter() - t0
    t0 = time.perf_counter()
    naive, _ = render_reference(g, cam)
    t_naive = time.perf_counter() - t0
    speedup = t_naive / t_tiled
    agree = float(np.abs(tiled - naive).max())
    ok = speedup >= 5 and agree <= 1e-5
    record(capsys, 8, ok, f"10k primitives at 640x480: tiled {t_tiled:.3f} s, naive {t_naive:.1f} s, "
                          f"speedup {speedup:.0f}x (>= 5x), max diff {agree:.1e}")
    assert ok
