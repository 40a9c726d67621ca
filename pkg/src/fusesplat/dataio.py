"""Posed visible/infrared datasets, PNG I/O and the synthetic scene generator.

Dataset layout::

    root/
      cameras.json
      visible/<name>.png
      infrared/<name>.png

``cameras.json`` schema (all keys required unless noted)::

    {
      "format": "fusesplat-cameras",
      "version": 1,
      "views": [
        {
          "name": "view_000",            # basename of both images
          "split": "train",              # "train" or "test"; optional, default "train"
          "fx": 140.8, "fy": 140.8,      # focal lengths, pixels
          "cx": 64.0, "cy": 64.0,        # principal point, pixels
          "width": 128, "height": 128,
          "world_to_camera": [[...], [...], [...], [...]],   # row-major 4x4
          "znear": 0.01, "zfar": 100.0   # optional
        }
      ]
    }
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import png

from ._io import atomic_write
from .exceptions import DatasetError, FuseSplatError, ImageDecodeError
from .geometry import Camera, look_at, sh_num_coeffs
from .scene import GaussianSet, Modality, MultimodalScene, logit

MANIFEST_NAME = "cameras.json"
MANIFEST_FORMAT = "fusesplat-cameras"
MANIFEST_VERSION = 1
VISIBLE_DIR = "visible"
INFRARED_DIR = "infrared"
SPLITS = ("train", "test")


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def read_image(path, replicate=True):
    """Decode an 8- or 16-bit grayscale/RGB PNG to floats in [0, 1].

    Grayscale images are replicated to three channels when ``replicate`` is
    True, otherwise returned with a single channel. Alpha is discarded.
    """
    try:
        reader = png.Reader(filename=os.fspath(path))
        width, height, rows, info = reader.asDirect()
        data = np.vstack([np.asarray(r, dtype=np.uint32) for r in rows])
    except FileNotFoundError:
        raise
    except (png.Error, EOFError, ValueError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    depth = info["bitdepth"]
    if depth not in (8, 16):
        raise ImageDecodeError(f"{path}: unsupported bit depth {depth}")
    planes = info["planes"]
    if data.shape != (height, width * planes):
        raise ImageDecodeError(f"{path}: decoded {data.shape}, expected {(height, width * planes)}")
    img = data.reshape(height, width, planes).astype(np.float64) / float(2**depth - 1)
    if info.get("alpha"):
        img = img[..., :-1]
    if img.shape[2] == 1 and replicate:
        img = np.repeat(img, 3, axis=2)
    return img


def encode_png(img, bitdepth=8):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if bitdepth not in (8, 16):
        raise ValueError(f"unsupported bit depth {bitdepth}")
    maxval = 2**bitdepth - 1
    q = np.floor(np.clip(img, 0.0, 1.0) * maxval + 0.5).astype(np.uint16 if bitdepth == 16 else np.uint8)
    if q.ndim == 2:
        h, w = q.shape
        writer = png.Writer(w, h, greyscale=True, bitdepth=bitdepth)
        rows = q
    elif q.ndim == 3 and q.shape[2] == 3:
        h, w, _ = q.shape
        writer = png.Writer(w, h, greyscale=False, bitdepth=bitdepth)
        rows = q.reshape(h, w * 3)
    else:
        raise ValueError(f"cannot encode image of shape {img.shape}")
    buf = io.BytesIO()
    writer.write(buf, rows.tolist())
    return buf.getvalue()


def write_image(path, img, bitdepth=8):
    """Encode ``img`` (H, W), (H, W, 1) or (H, W, 3) with round-half-up quantization."""
    atomic_write(path, encode_png(img, bitdepth))


def png_size(path):
    """``(width, height)`` from the PNG header without decoding pixel data."""
    try:
        reader = png.Reader(filename=os.fspath(path))
        reader.preamble()
        return reader.width, reader.height
    except (png.Error, EOFError, OSError) as exc:
        raise ImageDecodeError(f"cannot read header of {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass
class ViewRecord:
    name: str
    camera: Camera
    visible_path: Path
    infrared_path: Path
    split: str = "train"


@dataclass
class DatasetIndex:
    root: Path
    views: list = field(default_factory=list)

    def __len__(self):
        return len(self.views)

    def split(self, name):
        return [v for v in self.views if v.split == name]

    def load(self, split=None):
        """Decode the images of ``split`` (all views when None)."""
        views = self.views if split is None else self.split(split)
        return MultimodalDataset(
            names=[v.name for v in views],
            cameras=[v.camera for v in views],
            visible=[read_image(v.visible_path) for v in views],
            infrared=[read_image(v.infrared_path) for v in views],
        )


@dataclass
class MultimodalDataset:
    """Decoded views held in memory; infrared images are three-channel."""

    names: list
    cameras: list
    visible: list
    infrared: list

    def __len__(self):
        return len(self.cameras)

    def subset(self, idx):
        return MultimodalDataset([self.names[i] for i in idx], [self.cameras[i] for i in idx],
                                 [self.visible[i] for i in idx], [self.infrared[i] for i in idx])


def _manifest_error(path, exc):
    return DatasetError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}")


def read_manifest(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise _manifest_error(path, exc) from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    if doc.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {doc.get('version')}")
    if not isinstance(doc.get("views"), list):
        raise DatasetError(f"{path}: 'views' must be a list")
    return doc


def _parse_views(doc, source):
    out = []
    seen = set()
    for i, entry in enumerate(doc["views"]):
        try:
            name = str(entry["name"])
            cam = Camera.from_dict(entry)
        except (KeyError, TypeError, ValueError, FuseSplatError) as exc:
            raise DatasetError(f"{source}: view #{i} is invalid: {exc}") from exc
        if name in seen:
            raise DatasetError(f"{source}: duplicate view name '{name}'")
        seen.add(name)
        split = entry.get("split", "train")
        if split not in SPLITS:
            raise DatasetError(f"{source}: view '{name}' has unknown split {split!r}")
        out.append((name, cam, split))
    return out


def read_cameras(path):
    """Cameras from a manifest alone (no images), as ``[(name, camera, split)]`` in name order."""
    return sorted(_parse_views(read_manifest(path), path), key=lambda v: v[0])


def load_dataset(root, check_images=True):
    """Index a dataset directory; views are returned in basename order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"missing camera manifest: {manifest}")
    doc = read_manifest(manifest)
    vis_dir, ir_dir = root / VISIBLE_DIR, root / INFRARED_DIR

    vis_names = {p.stem for p in vis_dir.glob("*.png")}
    ir_names = {p.stem for p in ir_dir.glob("*.png")}
    if vis_names - ir_names:
        name = min(vis_names - ir_names)
        raise DatasetError(f"visible image '{name}' has no infrared counterpart")
    if ir_names - vis_names:
        name = min(ir_names - vis_names)
        raise DatasetError(f"infrared image '{name}' has no visible counterpart")

    views = []
    for name, cam, split in _parse_views(doc, manifest):
        vis, ir = vis_dir / f"{name}.png", ir_dir / f"{name}.png"
        if not vis.is_file() and not ir.is_file():
            raise DatasetError(f"view '{name}': no visible or infrared image found")
        if not vis.is_file():
            raise DatasetError(f"infrared image '{name}' has no visible counterpart")
        if not ir.is_file():
            raise DatasetError(f"visible image '{name}' has no infrared counterpart")
        if check_images:
            for p in (vis, ir):
                size = png_size(p)
                if size != (cam.width, cam.height):
                    raise DatasetError(
                        f"{p}: image is {size[0]}x{size[1]}, manifest declares {cam.width}x{cam.height}")
        views.append(ViewRecord(name, cam, vis, ir, split))
    views.sort(key=lambda v: v.name)
    return DatasetIndex(root=root, views=views)


def write_dataset(root, names, cameras, visible, infrared, splits=None, ir_bitdepth=8):
    """Materialize a dataset directory (manifest plus PNG pairs)."""
    root = Path(root)
    (root / VISIBLE_DIR).mkdir(parents=True, exist_ok=True)
    (root / INFRARED_DIR).mkdir(parents=True, exist_ok=True)
    splits = splits or ["train"] * len(names)
    entries = []
    for name, cam, v, t, split in zip(names, cameras, visible, infrared, splits):
        write_image(root / VISIBLE_DIR / f"{name}.png", v)
        t = np.asarray(t)
        write_image(root / INFRARED_DIR / f"{name}.png", t[..., 0] if t.ndim == 3 else t, bitdepth=ir_bitdepth)
        entries.append({"name": name, "split": split, **cam.to_dict()})
    doc = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "views": entries}
    atomic_write(root / MANIFEST_NAME, (json.dumps(doc, indent=1) + "\n").encode())
    return load_dataset(root)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class SyntheticScene:
    """Ground truth behind a generated dataset.

    Both modalities share every primitive's geometry. ``hot`` flags the
    primitives that are bright in infrared and dark in visible.
    """

    scene: MultimodalScene
    hot: np.ndarray
    cameras: list
    names: list
    splits: list
    ring_radius: float
    ring_height: float


def ring_cameras(n_views, width=128, height=128, radius=3.0, height_amplitude=0.6, focal_scale=1.1):
    """Cameras on a horizontal ring around the origin, alternating slightly up and down."""
    f = focal_scale * width
    cams = []
    for i in range(n_views):
        angle = 2.0 * np.pi * i / n_views
        elev = height_amplitude * (1.0 if i % 2 == 0 else -1.0) * 0.5
        eye = np.array([radius * np.sin(angle), elev, -radius * np.cos(angle)])
        cams.append(Camera(f, f, width / 2.0, height / 2.0, width, height, look_at(eye, np.zeros(3)),
                           znear=0.01, zfar=100.0))
    return cams


def _sh_from_rgb(rgb, K, rng, view_strength):
    from .geometry import SH_C0

    sh = np.zeros((rgb.shape[0], K, 3))
    sh[:, 0, :] = (rgb - 0.5) / SH_C0
    if K > 1 and view_strength > 0:
        sh[:, 1:4, :] = rng.normal(0.0, view_strength, size=(rgb.shape[0], 3, 3))
    return sh


def make_synthetic_scene(seed, n_gaussians=30, sh_degree=1, hot_fraction=0.3):
    """Random ground-truth scene: textured visible colors, mostly cool infrared with hot spots."""
    rng = np.random.default_rng(seed)
    K = sh_num_coeffs(sh_degree)
    P = n_gaussians
    dirs = rng.normal(size=(P, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = dirs * (0.75 * rng.uniform(0.0, 1.0, size=(P, 1)) ** (1.0 / 3.0))
    quats = rng.normal(size=(P, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.08, 0.22, size=(P, 3)))
    opacity_logits = logit(rng.uniform(0.6, 0.95, size=P))
    n_hot = max(1, int(round(hot_fraction * P)))
    hot = np.zeros(P, dtype=bool)
    hot[rng.choice(P, size=n_hot, replace=False)] = True

    vis_rgb = rng.uniform(0.35, 0.95, size=(P, 3))
    vis_rgb[hot] = rng.uniform(0.1, 0.3, size=(n_hot, 3))
    ir_level = rng.uniform(0.2, 0.4, size=P)
    ir_level[hot] = rng.uniform(0.9, 1.0, size=n_hot)
    ir_rgb = np.repeat(ir_level[:, None], 3, axis=1)

    vis = GaussianSet(means, quats, log_scales, opacity_logits,
                      _sh_from_rgb(vis_rgb, K, rng, 0.08), Modality.VISIBLE)
    ir = GaussianSet(means.copy(), quats.copy(), log_scales.copy(), opacity_logits.copy(),
                     _sh_from_rgb(ir_rgb, K, rng, 0.0), Modality.INFRARED)
    return MultimodalScene(vis, ir), hot


def render_modalities(scene, cam, background=(0.0, 0.0, 0.0)):
    from .rasterizer import render_single

    V = render_single(scene.visible, cam, background).image
    T = render_single(scene.infrared, cam, background).image
    return V, T


def hot_region_mask(synth, cam, threshold=0.5):
    """Pixels whose infrared composite is dominated by hot primitives."""
    from .rasterizer import render_single

    ir = synth.scene.infrared.copy()
    ir.sh[:] = 0.0
    ir.sh[synth.hot, 0, :] = 0.5 / 0.28209479177387814
    ir.sh[~synth.hot, 0, :] = -0.5 / 0.28209479177387814
    share = render_single(ir, cam).image[..., 0]
    return share > threshold


def generate_synthetic(seed, n_views=12, n_gaussians=30, out_dir=None, width=128, height=128,
                       sh_degree=1, test_every=4):
    """Render a ground-truth scene from a camera ring and write it as a dataset.

    Every ``test_every``-th view goes to the test split. Returns
    ``(DatasetIndex, SyntheticScene)``.
    """
    if n_views < 2:
        raise DatasetError("a synthetic dataset needs at least two views")
    if out_dir is None:
        out_dir = tempfile.mkdtemp(prefix="fusesplat-synth-")
    scene, hot = make_synthetic_scene(seed, n_gaussians, sh_degree)
    cams = ring_cameras(n_views, width, height)
    names = [f"view_{i:03d}" for i in range(n_views)]
    splits = ["test" if test_every and i % test_every == test_every - 1 else "train" for i in range(n_views)]
    visible, infrared = [], []
    for cam in cams:
        V, T = render_modalities(scene, cam)
        visible.append(V)
        infrared.append(T)
    index = write_dataset(out_dir, names, cams, visible, infrared, splits)
    synth = SyntheticScene(scene=scene, hot=hot, cameras=cams, names=names, splits=splits,
                           ring_radius=3.0, ring_height=0.3)
    return index, synth
