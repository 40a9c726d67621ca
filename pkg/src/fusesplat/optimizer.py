"""Two-stage training: per-modality reconstruction, then the CMA network."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from .cma import cma_backward, cma_forward, cma_init
from .exceptions import InvalidParameterError, ShapeError, TrainingError
from .geometry import SH_C0, build_covariances, quaternion_to_rotation, sh_num_coeffs
from .losses import FusionTargets, stage1_loss, stage2_loss
from .metrics import psnr
from .rasterizer import render, render_backward
from .scene import GaussianSet, Modality, MultimodalScene, concat_modalities, gaussian_count_ratio, logit, sigmoid

log = logging.getLogger(__name__)

GAUSSIAN_GROUPS = ("means", "quats", "log_scales", "opacity_logits", "sh")


@dataclass
class TrainConfig:
    """Hyper-parameters for both stages.

    ``densify_until`` defaults to half of ``stage1_iters``. Learning rates
    for positions are multiplied by the scene extent.
    """

    stage1_iters: int = 15000
    stage2_iters: int = 15000
    lambda1: float = 1.0
    lambda2: float = 2.0
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_cma: float = 1e-3
    densify_from: int = 500
    densify_until: int | None = None
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    opacity_reset_interval: int = 0
    max_gaussians: int = 20000
    n_init_points: int = 100
    init_radius: float | None = None
    sh_degree: int = 1
    cma_hidden: tuple = (64, 64)
    joint_finetune: bool = False
    seed: int = 0
    tile_size: int = 16
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.stage1_iters <= 0 or self.stage2_iters <= 0:
            raise InvalidParameterError("iteration counts must be positive")
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise InvalidParameterError(f"{f.name} must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidParameterError("loss weights must be non-negative")
        self.cma_hidden = tuple(int(h) for h in self.cma_hidden)
        self.background = tuple(float(b) for b in self.background)

    @property
    def densify_stop(self):
        return self.stage1_iters // 2 if self.densify_until is None else self.densify_until

    def to_dict(self):
        d = asdict(self)
        d["cma_hidden"] = list(self.cma_hidden)
        d["background"] = list(self.background)
        return d


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-15

    def select_rows(self, keep, n_new):
        """Keep moment rows ``keep`` and append ``n_new`` zero rows (after densification)."""
        for store in (self.m, self.v):
            for name, arr in store.items():
                kept = arr[keep]
                store[name] = np.concatenate([kept, np.zeros((n_new,) + arr.shape[1:])])


def adam_step(params, grads, state, lr):
    """One in-place Adam update of every array in ``params``.

    ``lr`` is a float or a mapping from parameter name to rate. Returns
    ``(params, state)``.
    """
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None or m.shape != p.shape:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def exponential_lr(step, total, lr_init, lr_final):
    t = min(max(step / max(total, 1), 0.0), 1.0)
    return math.exp((1.0 - t) * math.log(lr_init) + t * math.log(lr_final))


# ---------------------------------------------------------------------------
# Densification
# ---------------------------------------------------------------------------


@dataclass
class GradStats:
    """Accumulated screen-space positional gradient norms (NDC units)."""

    accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def add(self, d_means2d, touched, width, height):
        g = d_means2d * np.array([0.5 * width, 0.5 * height])
        self.accum[touched] += np.linalg.norm(g[touched], axis=1)
        self.denom[touched] += 1.0

    def mean(self):
        return np.where(self.denom > 0, self.accum / np.maximum(self.denom, 1.0), 0.0)


@dataclass
class DensifyThresholds:
    grad: float = 2e-4
    percent_dense: float = 0.01
    scene_extent: float = 1.0
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    clone_jitter: float = 0.05
    max_gaussians: int = 20000


def densify_and_prune(gset, stats, thresholds, rng):
    """Clone small and split large high-gradient primitives, then prune transparent ones.

    Returns ``(new_set, keep, n_new)``: the first ``len(keep)`` rows of
    ``new_set`` are ``gset[keep]`` unchanged and the remaining ``n_new`` rows
    are freshly created, which lets optimizer state follow along.
    """
    P = len(gset)
    grads = stats.mean()
    scales = np.exp(gset.log_scales).max(axis=1) if P else np.zeros(0)
    hot = grads >= thresholds.grad
    size_cut = thresholds.percent_dense * thresholds.scene_extent
    budget = max(thresholds.max_gaussians - P, 0)
    clone = hot & (scales <= size_cut)
    split = hot & (scales > size_cut)
    # Respect the primitive budget, preferring the largest gradients.
    n_requested = int(clone.sum()) + int(split.sum())
    if n_requested > budget:
        cand = np.flatnonzero(clone | split)
        allowed = cand[np.argsort(-grads[cand], kind="stable")[:budget]]
        mask = np.zeros(P, dtype=bool)
        mask[allowed] = True
        clone &= mask
        split &= mask

    new_parts = []
    if clone.any():
        src = gset.subset(clone)
        jitter = rng.normal(size=src.means.shape) * (thresholds.clone_jitter * np.exp(src.log_scales).max(axis=1))[:, None]
        src.means = src.means + jitter
        new_parts.append(src)
    if split.any():
        src = gset.subset(split)
        R = quaternion_to_rotation(src.quats)
        s = np.exp(src.log_scales)
        for _ in range(2):
            child = src.copy()
            local = rng.normal(size=s.shape) * s
            child.means = src.means + np.einsum("pij,pj->pi", R, local)
            child.log_scales = src.log_scales - math.log(thresholds.split_factor)
            new_parts.append(child)

    keep = ~split & (sigmoid(gset.opacity_logits) >= thresholds.prune_opacity)
    new = [n.subset(sigmoid(n.opacity_logits) >= thresholds.prune_opacity) for n in new_parts]
    keep_idx = np.flatnonzero(keep)
    out = GaussianSet.concatenate([gset.subset(keep_idx), *new]) if new else gset.subset(keep_idx)
    n_new = len(out) - len(keep_idx)
    return out, keep_idx, n_new


# ---------------------------------------------------------------------------
# Scene initialization
# ---------------------------------------------------------------------------


def scene_extent(cameras):
    """Radius of the camera-center cloud, slightly enlarged (positions lr scale)."""
    centers = np.stack([c.center for c in cameras])
    return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))


def scene_focus(cameras):
    """Least-squares point closest to every camera's optical axis."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for c in cameras:
        d = c.rotation[2]
        Pm = np.eye(3) - np.outer(d, d)
        A += Pm
        b += Pm @ c.center
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return np.mean([c.center for c in cameras], axis=0)


def _foreground_mean(images, threshold=0.02):
    stack = np.stack(images)
    fg = stack.max(axis=-1) > threshold
    if not fg.any():
        return stack.reshape(-1, 3).mean(axis=0)
    return stack[fg].mean(axis=0)


def initialize_scene(dataset, config, rng):
    """Shared random point cloud for both modalities.

    Positions are uniform in a cube around the cameras' common focus,
    scales isotropic at the mean nearest-neighbour distance, opacity 0.1,
    and the constant SH term set to each modality's mean foreground color.
    """
    center = scene_focus(dataset.cameras)
    if config.init_radius is not None:
        radius = config.init_radius
    else:
        dist = np.mean([np.linalg.norm(c.center - center) for c in dataset.cameras])
        radius = 0.3 * dist
    n = config.n_init_points
    means = center + rng.uniform(-radius, radius, size=(n, 3))
    if n > 1:
        d, _ = cKDTree(means).query(means, k=2)
        nn = float(np.mean(d[:, 1]))
    else:
        nn = radius
    K = sh_num_coeffs(config.sh_degree)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    log_scales = np.full((n, 3), math.log(nn))
    logits = np.full(n, float(logit(0.1)))
    sets = []
    for images, mod in ((dataset.visible, Modality.VISIBLE), (dataset.infrared, Modality.INFRARED)):
        sh = np.zeros((n, K, 3))
        sh[:, 0, :] = (_foreground_mean(images) - 0.5) / SH_C0
        sets.append(GaussianSet(means.copy(), quats.copy(), log_scales.copy(), logits.copy(), sh, mod))
    return MultimodalScene(*sets)


class ViewSampler:
    """Random order without replacement, reshuffled every epoch."""

    def __init__(self, n, rng):
        if n <= 0:
            raise TrainingError("dataset has no views")
        self.n = n
        self.rng = rng
        self._queue = []

    def __next__(self):
        if not self._queue:
            self._queue = list(self.rng.permutation(self.n)[::-1])
        return int(self._queue.pop())

    def __iter__(self):
        return self


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


@dataclass
class _ModalityState:
    gset: GaussianSet
    adam: AdamState
    stats: GradStats


def _gaussian_lrs(config, step, extent):
    return {
        "means": exponential_lr(step, config.stage1_iters, config.lr_position * extent,
                                config.lr_position_final * extent),
        "quats": config.lr_rotation,
        "log_scales": config.lr_scale,
        "opacity_logits": config.lr_opacity,
        "sh": config.lr_sh,
    }


def _gaussian_grads(grads):
    return {"means": grads.d_means, "quats": grads.d_quats, "log_scales": grads.d_log_scales,
            "opacity_logits": grads.d_opacity_logit, "sh": grads.d_sh}


def _apply_adam(gset, grads, adam, lrs):
    params = {name: getattr(gset, name) for name in GAUSSIAN_GROUPS}
    adam_step(params, grads, adam, lrs)


def _check_dataset(dataset):
    if len(dataset) == 0:
        raise TrainingError("dataset has no views")
    for k, (V, T, cam) in enumerate(zip(dataset.visible, dataset.infrared, dataset.cameras)):
        if V.shape != (cam.height, cam.width, 3) or T.shape != V.shape:
            raise TrainingError(f"view {k}: image shapes {V.shape}/{T.shape} do not match the camera")


@dataclass
class Stage1Result:
    scene: MultimodalScene
    history: list


def train_stage1(dataset, config, scene=None, callback=None, modalities=("visible", "infrared")):
    """Optimize both modalities' primitives against the balanced reconstruction loss.

    ``callback(iteration, scene, record)`` is invoked after every step.
    ``modalities`` restricts which sets are optimized (the other is left as is).
    """
    _check_dataset(dataset)
    rng = np.random.default_rng(config.seed)
    if scene is None:
        scene = initialize_scene(dataset, config, rng)
    else:
        scene = scene.copy()
    extent = scene_extent(dataset.cameras)
    states = {
        "visible": _ModalityState(scene.visible, AdamState(), GradStats.zeros(scene.n_visible)),
        "infrared": _ModalityState(scene.infrared, AdamState(), GradStats.zeros(scene.n_infrared)),
    }
    sampler = ViewSampler(len(dataset), rng)
    thresholds = DensifyThresholds(
        grad=config.densify_grad_threshold, percent_dense=config.percent_dense, scene_extent=extent,
        prune_opacity=config.prune_opacity, max_gaussians=config.max_gaussians)
    bg = config.background
    history = []

    for it in range(config.stage1_iters):
        k = next(sampler)
        cam = dataset.cameras[k]
        vis, ir = states["visible"], states["infrared"]
        gamma = gaussian_count_ratio(MultimodalScene(vis.gset, ir.gset))
        out_v = render(vis.gset, cam, background=bg, tile_size=config.tile_size)
        out_t = render(ir.gset, cam, background=bg, tile_size=config.tile_size)
        loss = stage1_loss(dataset.visible[k], out_v.image, dataset.infrared[k], out_t.image, gamma)
        if not math.isfinite(loss.value):
            raise TrainingError(f"stage 1: non-finite loss at iteration {it} (view {k})")

        lrs = _gaussian_lrs(config, it, extent)
        for name, out, d_img in (("visible", out_v, loss.d_visible), ("infrared", out_t, loss.d_infrared)):
            if name not in modalities:
                continue
            st = states[name]
            if len(st.gset) == 0:
                continue
            grads = render_backward(st.gset, cam, d_img, None, out, geometry=True, background=bg,
                                    tile_size=config.tile_size)
            touched = np.zeros(len(st.gset), dtype=bool)
            touched[out.bins.entries] = True
            st.stats.add(grads.d_means2d, touched, cam.width, cam.height)
            _apply_adam(st.gset, _gaussian_grads(grads), st.adam, lrs)
            if not all(np.all(np.isfinite(getattr(st.gset, n))) for n in GAUSSIAN_GROUPS):
                raise TrainingError(f"stage 1: non-finite {name} parameters after iteration {it}")

        record = {
            "iteration": it, "view": k, "loss": loss.value, "loss_visible": loss.visible,
            "loss_infrared": loss.infrared, "gamma": gamma,
            "psnr_visible": psnr(np.clip(out_v.image, 0, 1), dataset.visible[k]),
            "psnr_infrared": psnr(np.clip(out_t.image, 0, 1), dataset.infrared[k]),
            "n_visible": len(vis.gset), "n_infrared": len(ir.gset),
        }
        history.append(record)

        step = it + 1
        if (config.densify_from <= step < config.densify_stop and config.densify_interval > 0
                and step % config.densify_interval == 0):
            for name in modalities:
                st = states[name]
                new, keep, n_new = densify_and_prune(st.gset, st.stats, thresholds, rng)
                st.adam.select_rows(keep, n_new)
                st.gset = new
                st.stats = GradStats.zeros(len(new))
        if config.opacity_reset_interval and step % config.opacity_reset_interval == 0 and step < config.densify_stop:
            for name in modalities:
                st = states[name]
                st.gset.opacity_logits = np.minimum(st.gset.opacity_logits, float(logit(0.01)))
                st.adam.m.pop("opacity_logits", None)
                st.adam.v.pop("opacity_logits", None)
        if callback is not None:
            callback(it, MultimodalScene(states["visible"].gset, states["infrared"].gset), record)

    return Stage1Result(MultimodalScene(states["visible"].gset, states["infrared"].gset), history)


def reconstruction_psnr(scene, dataset, background=(0.0, 0.0, 0.0)):
    """Mean PSNR per modality of ``scene`` over every view of ``dataset``."""
    pv, pt = [], []
    for cam, V, T in zip(dataset.cameras, dataset.visible, dataset.infrared):
        pv.append(psnr(np.clip(render(scene.visible, cam, background=background).image, 0, 1), V))
        pt.append(psnr(np.clip(render(scene.infrared, cam, background=background).image, 0, 1), T))
    return float(np.mean(pv)), float(np.mean(pt))


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


@dataclass
class Stage2Result:
    params: object
    scene: MultimodalScene
    history: list


def train_stage2(scene, dataset, config, params=None, callback=None):
    """Fit the CMA network so fused renders satisfy the fusion loss.

    Gaussian parameters stay frozen unless ``config.joint_finetune`` is set,
    in which case SH coefficients and opacity logits are updated as well.
    """
    _check_dataset(dataset)
    rng = np.random.default_rng(config.seed + 7919)
    if params is None:
        params = cma_init(config.seed, scene.d_c, *config.cma_hidden)
    else:
        params = params.copy()
    if params.d_c != scene.d_c:
        raise ShapeError(f"CMA expects d_c={params.d_c}, scene has d_c={scene.d_c}")
    gset = concat_modalities(scene)
    adam = AdamState()
    gauss_adam = AdamState()
    targets = [FusionTargets(V, T) for V, T in zip(dataset.visible, dataset.infrared)]
    sampler = ViewSampler(len(dataset), rng)
    bg = config.background
    history = []
    for it in range(config.stage2_iters):
        k = next(sampler)
        cam = dataset.cameras[k]
        X = gset.sh_flat
        tau = cma_forward(params, X)
        out = render(gset, cam, tau, background=bg, tile_size=config.tile_size)
        loss = stage2_loss(out.image, targets[k], config.lambda1, config.lambda2)
        if not math.isfinite(loss.value):
            raise TrainingError(f"stage 2: non-finite loss at iteration {it} (view {k})")
        grads = render_backward(gset, cam, loss.d_image, tau, out, background=bg, tile_size=config.tile_size)
        if config.joint_finetune:
            d_params, d_x = cma_backward(params, X, grads.d_tau, return_input_grad=True)
            g_sh = grads.d_sh + d_x.reshape(gset.sh.shape)
            adam_step({"sh": gset.sh, "opacity_logits": gset.opacity_logits},
                      {"sh": g_sh, "opacity_logits": grads.d_opacity_logit},
                      gauss_adam, {"sh": config.lr_sh, "opacity_logits": config.lr_opacity})
        else:
            d_params = cma_backward(params, X, grads.d_tau)
        adam_step(params.arrays(), d_params.arrays(), adam, config.lr_cma)
        for name, arr in params.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise TrainingError(f"stage 2: non-finite CMA parameter {name} after iteration {it}")
        record = {"iteration": it, "view": k, "loss": loss.value,
                  "tau_mean": float(tau.mean()), "tau_min": float(tau.min()), "tau_max": float(tau.max())}
        history.append(record)
        if callback is not None:
            callback(it, params, record)
    from .scene import split_modalities

    out_scene = split_modalities(gset) if config.joint_finetune else scene
    return Stage2Result(params, out_scene, history)


def smoothed(values, window=100):
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)
