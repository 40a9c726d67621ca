"""Cross-modal adjustment network.

A per-primitive MLP mapping a primitive's flattened SH coefficients to an
opacity scale ``tau`` in (0, 1)::

    h1  = LayerNorm(LeakyReLU(x W1 + b1))
    h2  = LayerNorm(LeakyReLU(h1 W2 + b2))
    tau = sigmoid(h2 . W3)

Both modalities are stacked row-wise (visible first) and every row is
processed independently, so tau depends only on the primitive's own
coefficients.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields

import numpy as np

from ._io import atomic_write
from .exceptions import CheckpointError, InvalidParameterError, ShapeError
from .scene import concat_modalities, sigmoid

DEFAULT_HIDDEN = 64
LEAKY_SLOPE = 0.01
LN_EPS = 1e-5

_MAGIC = b"FSCMA\x00"
_VERSION = 1
_HEADER = struct.Struct("<6sIIIIdd")
_ARRAYS = ("W1", "b1", "ln1_gain", "ln1_bias", "W2", "b2", "ln2_gain", "ln2_bias", "W3")


@dataclass
class CmaParameters:
    W1: np.ndarray
    b1: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    W3: np.ndarray
    negative_slope: float = LEAKY_SLOPE
    ln_eps: float = LN_EPS

    def __post_init__(self):
        for name in _ARRAYS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d_c, h1 = self.W1.shape
        h2 = self.W2.shape[1]
        expected = {
            "b1": (h1,), "ln1_gain": (h1,), "ln1_bias": (h1,), "W2": (h1, h2),
            "b2": (h2,), "ln2_gain": (h2,), "ln2_bias": (h2,), "W3": (h2,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def d_c(self):
        return self.W1.shape[0]

    @property
    def hidden(self):
        return self.W1.shape[1], self.W2.shape[1]

    def arrays(self):
        return {name: getattr(self, name) for name in _ARRAYS}

    def copy(self):
        return CmaParameters(**{f.name: (v.copy() if isinstance(v := getattr(self, f.name), np.ndarray) else v)
                                for f in fields(self)})

    def equals(self, other):
        return (self.negative_slope == other.negative_slope and self.ln_eps == other.ln_eps
                and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in _ARRAYS))

    @classmethod
    def zeros(cls, d_c, h1=DEFAULT_HIDDEN, h2=DEFAULT_HIDDEN):
        return cls(W1=np.zeros((d_c, h1)), b1=np.zeros(h1), ln1_gain=np.ones(h1), ln1_bias=np.zeros(h1),
                   W2=np.zeros((h1, h2)), b2=np.zeros(h2), ln2_gain=np.ones(h2), ln2_bias=np.zeros(h2),
                   W3=np.zeros(h2))


def cma_init(seed, d_c, h1=DEFAULT_HIDDEN, h2=DEFAULT_HIDDEN):
    """Glorot-uniform weights, zero biases, identity layer norms."""
    if min(d_c, h1, h2) <= 0:
        raise InvalidParameterError(f"dimensions must be positive, got d_c={d_c}, h1={h1}, h2={h2}")
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out, shape):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    params = CmaParameters.zeros(d_c, h1, h2)
    params.W1 = glorot(d_c, h1, (d_c, h1))
    params.W2 = glorot(h1, h2, (h1, h2))
    params.W3 = glorot(h2, 1, (h2,))
    return params


def _leaky(z, slope):
    return np.where(z > 0, z, slope * z)


def _layer_norm(a, gain, bias, eps):
    mu = a.mean(axis=1, keepdims=True)
    var = a.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a - mu) * inv_std
    return xhat * gain + bias, xhat, inv_std


def _layer_norm_backward(dy, xhat, inv_std, gain):
    dxhat = dy * gain
    d_gain = np.sum(dy * xhat, axis=0)
    d_bias = np.sum(dy, axis=0)
    dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True))
    return dx, d_gain, d_bias


def _as_input(params, features):
    if hasattr(features, "visible"):
        features = concat_modalities(features).sh_flat
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d_c:
        raise ShapeError(f"CMA expects inputs of width {params.d_c}, got shape {X.shape}")
    return X


def _forward(params, X):
    p = params
    z1 = X @ p.W1 + p.b1
    a1 = _leaky(z1, p.negative_slope)
    h1, xh1, is1 = _layer_norm(a1, p.ln1_gain, p.ln1_bias, p.ln_eps)
    z2 = h1 @ p.W2 + p.b2
    a2 = _leaky(z2, p.negative_slope)
    h2, xh2, is2 = _layer_norm(a2, p.ln2_gain, p.ln2_bias, p.ln_eps)
    tau = sigmoid(h2 @ p.W3)
    return tau, (z1, h1, xh1, is1, z2, h2, xh2, is2)


def cma_forward(params, scene):
    """Opacity scales for every primitive of ``scene`` in concatenation order.

    ``scene`` may also be an ``(P, d_c)`` array of flattened SH coefficients.
    """
    tau, _ = _forward(params, _as_input(params, scene))
    return tau


def cma_backward(params, scene, d_tau, return_input_grad=False):
    """Reverse pass of :func:`cma_forward`.

    Returns a :class:`CmaParameters` holding the gradients, and additionally
    the gradient with respect to the input coefficients when requested.
    """
    X = _as_input(params, scene)
    d_tau = np.asarray(d_tau, dtype=np.float64).reshape(-1)
    if d_tau.shape[0] != X.shape[0]:
        raise ShapeError(f"d_tau has {d_tau.shape[0]} entries for {X.shape[0]} primitives")
    p = params
    tau, (z1, h1, xh1, is1, z2, h2, xh2, is2) = _forward(p, X)
    ds = d_tau * tau * (1.0 - tau)
    dW3 = h2.T @ ds
    dh2 = ds[:, None] * p.W3[None, :]
    da2, dg2, dbeta2 = _layer_norm_backward(dh2, xh2, is2, p.ln2_gain)
    dz2 = da2 * np.where(z2 > 0, 1.0, p.negative_slope)
    dW2 = h1.T @ dz2
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ p.W2.T
    da1, dg1, dbeta1 = _layer_norm_backward(dh1, xh1, is1, p.ln1_gain)
    dz1 = da1 * np.where(z1 > 0, 1.0, p.negative_slope)
    dW1 = X.T @ dz1
    db1 = dz1.sum(axis=0)
    grads = CmaParameters(W1=dW1, b1=db1, ln1_gain=dg1, ln1_bias=dbeta1, W2=dW2, b2=db2,
                          ln2_gain=dg2, ln2_bias=dbeta2, W3=dW3,
                          negative_slope=p.negative_slope, ln_eps=p.ln_eps)
    if return_input_grad:
        return grads, dz1 @ p.W1.T
    return grads


def cma_to_bytes(params):
    d_c, (h1, h2) = params.d_c, params.hidden
    body = b"".join(np.ascontiguousarray(getattr(params, n), dtype="<f8").tobytes() for n in _ARRAYS)
    header = _HEADER.pack(_MAGIC, _VERSION, d_c, h1, h2, params.negative_slope, params.ln_eps)
    payload = header + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def cma_from_bytes(data):
    if len(data) < _HEADER.size + 4:
        raise CheckpointError("checkpoint is too short to hold a header")
    magic, version, d_c, h1, h2, slope, eps = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise CheckpointError("not a CMA checkpoint (bad magic)")
    if version != _VERSION:
        raise CheckpointError(f"unsupported CMA checkpoint version {version}")
    if min(d_c, h1, h2) <= 0:
        raise CheckpointError(f"invalid dimensions in header: d_c={d_c}, h1={h1}, h2={h2}")
    shapes = {"W1": (d_c, h1), "b1": (h1,), "ln1_gain": (h1,), "ln1_bias": (h1,), "W2": (h1, h2),
              "b2": (h2,), "ln2_gain": (h2,), "ln2_bias": (h2,), "W3": (h2,)}
    n_values = sum(int(np.prod(s)) for s in shapes.values())
    expected = _HEADER.size + 8 * n_values + 4
    if len(data) != expected:
        raise CheckpointError(f"checkpoint size {len(data)} does not match header (expected {expected})")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if crc != zlib.crc32(data[:expected - 4]):
        raise CheckpointError("checkpoint checksum mismatch")
    values = np.frombuffer(data, dtype="<f8", count=n_values, offset=_HEADER.size)
    arrays = {}
    pos = 0
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        arrays[name] = values[pos:pos + n].reshape(shape).astype(np.float64)
        pos += n
    return CmaParameters(**arrays, negative_slope=slope, ln_eps=eps)


def save_cma(params, path):
    atomic_write(path, cma_to_bytes(params))


def load_cma(path, d_c=None):
    """Load a checkpoint; ``d_c`` optionally asserts the expected input width."""
    with open(path, "rb") as fh:
        params = cma_from_bytes(fh.read())
    if d_c is not None and params.d_c != d_c:
        raise ShapeError(f"checkpoint expects d_c={params.d_c}, scene has d_c={d_c}")
    return params
