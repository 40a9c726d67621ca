"""Gaussian primitives, the two-modality scene, and PLY serialization."""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields

import numpy as np

from ._io import atomic_write
from .exceptions import InvalidParameterError, SceneFormatError, ShapeError, ValidationError
from .geometry import sh_degree_from_dim, sh_num_coeffs


class Modality(enum.IntEnum):
    VISIBLE = 0
    INFRARED = 1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianPrimitive:
    """A single Gaussian; scales are logarithms and opacity is a logit."""

    mean: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    modality: Modality

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianSet:
    """Struct-of-arrays storage for P primitives.

    Attributes
    ----------
    means : (P, 3)
    quats : (P, 4) raw quaternions ``(w, x, y, z)``
    log_scales : (P, 3)
    opacity_logits : (P,)
    sh : (P, K, 3)
    modality : (P,) int8 holding :class:`Modality` values
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    modality: np.ndarray

    PARAM_FIELDS = ("means", "quats", "log_scales", "opacity_logits", "sh")

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        P = self.means.shape[0]
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(P, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(P, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(P)
        sh = np.asarray(self.sh, dtype=np.float64)
        if sh.ndim == 2:
            sh = sh.reshape(P, -1, 3)
        if sh.ndim != 3 or sh.shape[0] != P or sh.shape[2] != 3:
            raise ShapeError(f"sh must have shape (P, K, 3), got {sh.shape}")
        sh_degree_from_dim(3 * sh.shape[1])
        self.sh = sh
        mod = np.asarray(self.modality)
        if mod.ndim == 0:
            mod = np.full(P, int(mod), dtype=np.int8)
        self.modality = mod.astype(np.int8).reshape(P)
        if not np.all(np.isin(self.modality, [m.value for m in Modality])):
            raise ValidationError("modality tags must be 0 (visible) or 1 (infrared)")

    @classmethod
    def empty(cls, sh_degree, modality=Modality.VISIBLE):
        K = sh_num_coeffs(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, K, 3)), np.full(0, int(modality), dtype=np.int8))

    @classmethod
    def from_primitives(cls, prims, sh_degree=None):
        prims = list(prims)
        if not prims:
            if sh_degree is None:
                raise ShapeError("sh_degree is required for an empty primitive list")
            return cls.empty(sh_degree)
        return cls(
            means=np.stack([p.mean for p in prims]),
            quats=np.stack([p.rotation for p in prims]),
            log_scales=np.stack([p.log_scale for p in prims]),
            opacity_logits=np.array([p.opacity_logit for p in prims], dtype=np.float64),
            sh=np.stack([np.asarray(p.sh, dtype=np.float64).reshape(-1, 3) for p in prims]),
            modality=np.array([int(p.modality) for p in prims], dtype=np.int8),
        )

    def __len__(self):
        return self.means.shape[0]

    def __getitem__(self, i):
        return GaussianPrimitive(
            mean=self.means[i].copy(), rotation=self.quats[i].copy(),
            log_scale=self.log_scales[i].copy(), opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].copy(), modality=Modality(int(self.modality[i])),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def sh_degree(self):
        return sh_degree_from_dim(3 * self.sh.shape[1])

    @property
    def d_c(self):
        return 3 * self.sh.shape[1]

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def sh_flat(self):
        return self.sh.reshape(len(self), -1)

    def copy(self):
        return GaussianSet(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def subset(self, idx):
        return GaussianSet(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def check_finite(self):
        for name in self.PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(f"non-finite values in {name}")

    def equals(self, other):
        """Bitwise equality of every field."""
        return all(
            getattr(self, f.name).shape == getattr(other, f.name).shape
            and np.array_equal(getattr(self, f.name), getattr(other, f.name))
            for f in fields(self)
        )

    @staticmethod
    def concatenate(sets):
        sets = list(sets)
        return GaussianSet(**{
            f.name: np.concatenate([getattr(s, f.name) for s in sets]) for f in fields(GaussianSet)
        })


class MultimodalScene:
    """Visible and infrared primitive sets sharing one SH degree."""

    def __init__(self, visible, infrared):
        if visible.sh_degree != infrared.sh_degree:
            raise ShapeError(
                f"SH degree mismatch: visible {visible.sh_degree}, infrared {infrared.sh_degree}")
        if np.any(visible.modality != Modality.VISIBLE):
            raise ValidationError("visible set contains non-visible primitives")
        if np.any(infrared.modality != Modality.INFRARED):
            raise ValidationError("infrared set contains non-infrared primitives")
        self.visible = visible
        self.infrared = infrared

    @property
    def sh_degree(self):
        return self.visible.sh_degree

    @property
    def d_c(self):
        return self.visible.d_c

    @property
    def n_visible(self):
        return len(self.visible)

    @property
    def n_infrared(self):
        return len(self.infrared)

    def __len__(self):
        return self.n_visible + self.n_infrared

    def modality_set(self, modality):
        return self.visible if Modality(modality) == Modality.VISIBLE else self.infrared

    def copy(self):
        return MultimodalScene(self.visible.copy(), self.infrared.copy())

    def equals(self, other):
        return self.visible.equals(other.visible) and self.infrared.equals(other.infrared)

    def __repr__(self):
        return f"MultimodalScene(N={self.n_visible}, M={self.n_infrared}, sh_degree={self.sh_degree})"


def concat_modalities(scene):
    """Stack visible then infrared primitives into one set.

    The position of a primitive in the returned set is its global index; the
    ordering is fixed so per-primitive vectors such as tau line up.
    """
    return GaussianSet.concatenate([scene.visible, scene.infrared])


def iter_concat(scene):
    """Yield ``(GaussianPrimitive, global_index)`` in concatenation order."""
    for i, prim in enumerate(concat_modalities(scene)):
        yield prim, i


def split_modalities(gset):
    """Inverse of :func:`concat_modalities`."""
    vis = gset.modality == Modality.VISIBLE
    n_vis = int(vis.sum())
    if not np.all(vis[:n_vis]) or np.any(vis[n_vis:]):
        raise ValidationError("set is not ordered visible-then-infrared")
    return MultimodalScene(gset.subset(slice(0, n_vis)), gset.subset(slice(n_vis, None)))


def gaussian_count_ratio(scene):
    """Share of infrared primitives, ``M / (N + M)``."""
    total = scene.n_visible + scene.n_infrared
    if total == 0:
        raise InvalidParameterError("count ratio is undefined for an empty scene")
    return scene.n_infrared / total


# ---------------------------------------------------------------------------
# PLY I/O
# ---------------------------------------------------------------------------

_PLY_MAGIC = b"ply\n"
_END_HEADER = b"end_header\n"


def _ply_property_names(K):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (K - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def _ply_dtype(K):
    return np.dtype([(n, "<f8") for n in _ply_property_names(K)] + [("modality", "u1")])


def _set_to_records(gset):
    K = gset.sh.shape[1]
    rec = np.empty(len(gset), dtype=_ply_dtype(K))
    rec["x"], rec["y"], rec["z"] = gset.means.T
    for c in range(3):
        rec[f"f_dc_{c}"] = gset.sh[:, 0, c]
    # f_rest is channel-major, matching common splat viewers.
    for c in range(3):
        for k in range(1, K):
            rec[f"f_rest_{c * (K - 1) + k - 1}"] = gset.sh[:, k, c]
    rec["opacity"] = gset.opacity_logits
    for i in range(3):
        rec[f"scale_{i}"] = gset.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = gset.quats[:, i]
    rec["modality"] = gset.modality.astype(np.uint8)
    return rec


def _records_to_set(rec, K):
    P = rec.shape[0]
    sh = np.empty((P, K, 3))
    for c in range(3):
        sh[:, 0, c] = rec[f"f_dc_{c}"]
        for k in range(1, K):
            sh[:, k, c] = rec[f"f_rest_{c * (K - 1) + k - 1}"]
    modality = rec["modality"]
    bad = ~np.isin(modality, [m.value for m in Modality])
    if np.any(bad):
        raise ValidationError(f"unknown modality value {int(modality[bad][0])} in vertex {int(np.argmax(bad))}")
    return GaussianSet(
        means=np.stack([rec["x"], rec["y"], rec["z"]], axis=1),
        quats=np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1),
        log_scales=np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1),
        opacity_logits=rec["opacity"].copy(),
        sh=sh,
        modality=modality.astype(np.int8),
    )


def scene_to_ply_bytes(scene):
    gset = concat_modalities(scene)
    K = gset.sh.shape[1]
    lines = [
        "ply",
        "format binary_little_endian 1.0",
        f"comment sh_degree {scene.sh_degree}",
        f"comment n_visible {scene.n_visible}",
        f"comment n_infrared {scene.n_infrared}",
        f"element vertex {len(gset)}",
    ]
    lines += [f"property double {n}" for n in _ply_property_names(K)]
    lines += ["property uchar modality", "end_header"]
    header = ("\n".join(lines) + "\n").encode("ascii")
    return header + _set_to_records(gset).tobytes()


def save_scene(scene, path):
    """Write ``scene`` as a binary little-endian PLY file (atomically)."""
    atomic_write(path, scene_to_ply_bytes(scene))


def scene_from_ply_bytes(data):
    if not data.startswith(_PLY_MAGIC):
        raise SceneFormatError("missing 'ply' magic", offset=0)
    end = data.find(_END_HEADER)
    if end < 0:
        raise SceneFormatError("header has no end_header line", offset=len(data))
    body_offset = end + len(_END_HEADER)
    try:
        header_lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise SceneFormatError("header is not ASCII", offset=exc.start) from exc

    n_vertex = None
    props = []
    fmt = None
    for line in header_lines[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            fmt = tok[1:]
        elif tok[0] == "element":
            if tok[1] != "vertex" or n_vertex is not None:
                raise SceneFormatError(f"unsupported element {tok[1]!r}")
            n_vertex = int(tok[2])
        elif tok[0] == "property":
            if len(tok) != 3:
                raise SceneFormatError(f"malformed property line {line!r}")
            props.append((tok[2], tok[1]))
        else:
            raise SceneFormatError(f"unexpected header line {line!r}")
    if fmt != ["binary_little_endian", "1.0"]:
        raise SceneFormatError(f"unsupported format {fmt}")
    if n_vertex is None or n_vertex < 0:
        raise SceneFormatError("missing vertex element")

    n_rest = sum(1 for name, _ in props if name.startswith("f_rest_"))
    if n_rest % 3:
        raise ShapeError(f"f_rest count {n_rest} is not a multiple of 3")
    K = n_rest // 3 + 1
    sh_degree_from_dim(3 * K)
    expected = [(n, "double") for n in _ply_property_names(K)] + [("modality", "uchar")]
    if props != expected:
        raise SceneFormatError("vertex properties do not match the scene layout")

    dtype = _ply_dtype(K)
    body = data[body_offset:]
    need = n_vertex * dtype.itemsize
    if len(body) < need:
        full = len(body) // dtype.itemsize
        raise SceneFormatError(
            f"truncated vertex data: {full} of {n_vertex} records complete",
            offset=body_offset + full * dtype.itemsize,
        )
    if len(body) > need:
        raise SceneFormatError("trailing bytes after vertex data", offset=body_offset + need)
    rec = np.frombuffer(body, dtype=dtype, count=n_vertex)
    gset = _records_to_set(rec, K)
    try:
        return split_modalities(gset)
    except ValidationError as exc:
        raise ValidationError(f"invalid scene file: {exc}") from exc


def load_scene(path):
    """Read a scene written by :func:`save_scene`."""
    with open(path, "rb") as fh:
        data = fh.read()
    return scene_from_ply_bytes(data)
