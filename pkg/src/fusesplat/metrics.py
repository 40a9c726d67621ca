"""PSNR/SSIM and the fused-image protocol: score against both sources, then average."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from ._io import atomic_write
from .exceptions import ShapeError
from .losses import ssim

SCORE_KEYS = ("psnr_vs_V", "psnr_vs_T", "psnr_avg", "ssim_vs_V", "ssim_vs_T", "ssim_avg")


def quantize8(img):
    """Round-half-up to 8-bit levels, returned as floats in [0, 1]."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5) / 255.0


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass
class FusedScore:
    psnr_vs_V: float
    psnr_vs_T: float
    psnr_avg: float
    ssim_vs_V: float
    ssim_vs_T: float
    ssim_avg: float
    scene: str = ""
    view: str = ""

    def to_json(self):
        d = asdict(self)
        for k in SCORE_KEYS:
            if not math.isfinite(d[k]):
                d[k] = None
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        for k in SCORE_KEYS:
            if d.get(k) is None:
                d[k] = math.inf
        return cls(**{k: d[k] for k in SCORE_KEYS}, scene=d.get("scene", ""), view=d.get("view", ""))


def _rgb(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    return x


def evaluate_fused(I_fuse, V, T, quantize=False, scene="", view=""):
    """Score a fused image against both sources and average each metric.

    ``quantize`` rounds all three images to 8-bit levels first.
    """
    F, V, T = _rgb(I_fuse), _rgb(V), _rgb(T)
    if T.shape[2] == 1 and F.shape[2] != 1:
        T = np.repeat(T, F.shape[2], axis=2)
    if not F.shape == V.shape == T.shape:
        raise ShapeError(f"shape mismatch: fused {F.shape}, V {V.shape}, T {T.shape}")
    if quantize:
        F, V, T = quantize8(F), quantize8(V), quantize8(T)
    pv, pt = psnr(F, V), psnr(F, T)
    sv, _ = ssim(F, V, with_grad=False)
    st, _ = ssim(F, T, with_grad=False)
    return FusedScore(psnr_vs_V=pv, psnr_vs_T=pt, psnr_avg=(pv + pt) / 2.0,
                      ssim_vs_V=sv, ssim_vs_T=st, ssim_avg=(sv + st) / 2.0, scene=scene, view=view)


def _mean(values):
    values = list(values)
    if not values:
        return None
    m = float(np.mean(values))
    return m if math.isfinite(m) else None


def scene_means(scores):
    """Mean of every metric per scene, keyed by scene name (insertion order)."""
    groups = {}
    for s in scores:
        groups.setdefault(s.scene, []).append(s)
    return {
        name: {k: _mean(getattr(s, k) for s in group) for k in SCORE_KEYS} | {"n_views": len(group)}
        for name, group in groups.items()
    }


def _fmt(v):
    return "inf" if v is None else f"{v:.10f}"


def format_table(means):
    header = ["scene", "n_views", *SCORE_KEYS, "lpips"]
    rows = [[name, str(m["n_views"]), *(_fmt(m[k]) for k in SCORE_KEYS), "n/a"] for name, m in means.items()]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header, *rows]]
    return "\n".join(lines) + "\n"


def report(scores, path):
    """Write ``<path>.json`` and ``<path>.txt`` (path may also be a directory).

    LPIPS is not computed; the JSON marks it unavailable.
    """
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "report")
    base = path[:-5] if path.endswith(".json") else path
    scores = list(scores)
    means = scene_means(scores)
    doc = {
        "metrics": list(SCORE_KEYS),
        "lpips": {"available": False, "reason": "requires a pretrained perceptual network"},
        "scores": [s.to_json() for s in scores],
        "scene_means": means,
    }
    atomic_write(base + ".json", (json.dumps(doc, indent=2) + "\n").encode())
    atomic_write(base + ".txt", format_table(means).encode())
    return base + ".json", base + ".txt"


def load_report(path):
    with open(path) as fh:
        doc = json.load(fh)
    return [FusedScore.from_json(d) for d in doc["scores"]], doc
