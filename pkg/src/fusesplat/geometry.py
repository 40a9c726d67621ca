"""Quaternions, covariances, pinhole projection and spherical harmonics.

Conventions
-----------
* Quaternions are stored as ``(w, x, y, z)``.
* Cameras use a row-major 4x4 world-to-camera transform. Camera space is
  x right, y down, looking down +z; pixel ``(row i, col j)`` has its center
  at image coordinates ``(x=j, y=i)``.
* SH coefficients of one primitive are a ``(K, 3)`` array with
  ``K = (degree + 1) ** 2``; the flat form of length ``3 * K`` is its
  row-major ravel (all three channels of basis 0 first).

Everything here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidParameterError, ShapeError

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.4453057213202769,
    -0.5900435899266435,
)
SH_COLOR_OFFSET = 0.5
MAX_SH_DEGREE = 3

# Low-pass dilation added to every projected covariance (px^2).
COV2D_DILATION = 0.3
# Projected means may leave the image by this fraction before the
# perspective Jacobian is clamped.
_JACOBIAN_GUARD = 0.15


def sh_num_coeffs(degree):
    """Number of SH basis functions per channel for ``degree``."""
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise InvalidParameterError(f"SH degree must be in [0, {MAX_SH_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def sh_degree_from_dim(d_c):
    """Inverse of ``3 * sh_num_coeffs``; raises ShapeError for invalid sizes."""
    for deg in range(MAX_SH_DEGREE + 1):
        if 3 * (deg + 1) ** 2 == d_c:
            return deg
    raise ShapeError(f"{d_c} is not a valid SH coefficient count (expected 3*(L+1)^2)")


def sh_basis(dirs, degree):
    """Real SH basis values at unit directions.

    Parameters
    ----------
    dirs : ndarray of shape (P, 3)
    degree : int

    Returns
    -------
    ndarray of shape (P, K)
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    K = sh_num_coeffs(degree)
    out = np.empty(dirs.shape[:-1] + (K,))
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_jacobian(dirs, degree):
    """Derivatives of :func:`sh_basis` with respect to the direction, shape (P, K, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    K = sh_num_coeffs(degree)
    jac = np.zeros(dirs.shape[:-1] + (K, 3))
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    if degree >= 1:
        jac[..., 1, 1] = -SH_C1
        jac[..., 2, 2] = SH_C1
        jac[..., 3, 0] = -SH_C1
    if degree >= 2:
        jac[..., 4, 0] = SH_C2[0] * y
        jac[..., 4, 1] = SH_C2[0] * x
        jac[..., 5, 1] = SH_C2[1] * z
        jac[..., 5, 2] = SH_C2[1] * y
        jac[..., 6, 0] = -2.0 * SH_C2[2] * x
        jac[..., 6, 1] = -2.0 * SH_C2[2] * y
        jac[..., 6, 2] = 4.0 * SH_C2[2] * z
        jac[..., 7, 0] = SH_C2[3] * z
        jac[..., 7, 2] = SH_C2[3] * x
        jac[..., 8, 0] = 2.0 * SH_C2[4] * x
        jac[..., 8, 1] = -2.0 * SH_C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C3
        jac[..., 9, 0] = c[0] * 6.0 * x * y
        jac[..., 9, 1] = c[0] * (3.0 * xx - 3.0 * yy)
        jac[..., 10, 0] = c[1] * y * z
        jac[..., 10, 1] = c[1] * x * z
        jac[..., 10, 2] = c[1] * x * y
        jac[..., 11, 0] = c[2] * (-2.0 * x * y)
        jac[..., 11, 1] = c[2] * (4.0 * zz - xx - 3.0 * yy)
        jac[..., 11, 2] = c[2] * 8.0 * y * z
        jac[..., 12, 0] = c[3] * (-6.0 * x * z)
        jac[..., 12, 1] = c[3] * (-6.0 * y * z)
        jac[..., 12, 2] = c[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        jac[..., 13, 0] = c[4] * (4.0 * zz - 3.0 * xx - yy)
        jac[..., 13, 1] = c[4] * (-2.0 * x * y)
        jac[..., 13, 2] = c[4] * 8.0 * x * z
        jac[..., 14, 0] = c[5] * 2.0 * x * z
        jac[..., 14, 1] = c[5] * (-2.0 * y * z)
        jac[..., 14, 2] = c[5] * (xx - yy)
        jac[..., 15, 0] = c[6] * (3.0 * xx - 3.0 * yy)
        jac[..., 15, 1] = c[6] * (-6.0 * x * y)
    return jac


def sh_to_color(sh_coeffs, view_dir, degree=None, clamp=True):
    """Evaluate view-dependent RGB for one primitive.

    ``sh_coeffs`` is either the flat length ``3 * K`` vector or the ``(K, 3)``
    array. The result is ``sum_k Y_k(dir) * c_k + 0.5``, clamped at zero
    unless ``clamp`` is False.
    """
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    if sh.ndim == 1:
        if degree is None:
            degree = sh_degree_from_dim(sh.size)
        elif sh.size != 3 * sh_num_coeffs(degree):
            raise ShapeError(f"expected {3 * sh_num_coeffs(degree)} SH coefficients, got {sh.size}")
        sh = sh.reshape(-1, 3)
    else:
        if degree is None:
            degree = sh_degree_from_dim(sh.size)
        if sh.shape != (sh_num_coeffs(degree), 3):
            raise ShapeError(f"expected SH array of shape ({sh_num_coeffs(degree)}, 3), got {sh.shape}")
    d = np.asarray(view_dir, dtype=np.float64).reshape(1, 3)
    rgb = sh_basis(d, degree)[0] @ sh + SH_COLOR_OFFSET
    return np.maximum(rgb, 0.0) if clamp else rgb


def eval_sh_colors(sh, dirs):
    """Batched colors for ``sh`` of shape (P, K, 3) at ``dirs`` (P, 3).

    Returns ``(colors, raw)`` where ``raw`` is the unclamped value; callers
    need it to mask gradients at the zero clamp.
    """
    degree = sh_degree_from_dim(3 * sh.shape[1])
    basis = sh_basis(dirs, degree)
    raw = np.einsum("pk,pkc->pc", basis, sh) + SH_COLOR_OFFSET
    return np.maximum(raw, 0.0), raw


# ---------------------------------------------------------------------------
# Quaternions and covariances
# ---------------------------------------------------------------------------


def normalize_quaternion(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(q)):
        raise InvalidParameterError("quaternion must be finite and nonzero")
    return q / norm


def quaternion_to_rotation(q):
    """Rotation matrices for quaternions ``(..., 4)``; inputs are normalized first."""
    w, x, y, z = np.moveaxis(normalize_quaternion(q), -1, 0)
    R = np.empty(np.shape(w) + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_rotation_vjp(q, dL_dR):
    """Pull ``dL/dR`` (P, 3, 3) back to the raw (unnormalized) quaternions (P, 4)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    G = dL_dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    qn = q / norm
    # d(q/|q|)/dq = (I - qn qn^T) / |q|
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm


def build_covariances(quats, log_scales):
    """Batched ``R diag(s)^2 R^T`` with ``s = exp(log_scales)``, shape (P, 3, 3)."""
    log_scales = np.asarray(log_scales, dtype=np.float64)
    if not np.all(np.isfinite(log_scales)):
        raise InvalidParameterError("log_scale must be finite")
    R = quaternion_to_rotation(quats)
    M = R * np.exp(log_scales)[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def build_covariance(rotation, log_scale):
    """Covariance of a single primitive from its quaternion and log-scales."""
    q = np.asarray(rotation, dtype=np.float64).reshape(4)
    s = np.asarray(log_scale, dtype=np.float64).reshape(3)
    return build_covariances(q[None], s[None])[0]


# ---------------------------------------------------------------------------
# Cameras and projection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    znear: float = 0.01
    zfar: float = 100.0

    def __post_init__(self):
        w2c = np.array(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ShapeError(f"world_to_camera must be 4x4, got {w2c.shape}")
        if not np.all(np.isfinite(w2c)):
            raise InvalidParameterError("world_to_camera must be finite")
        R = w2c[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-5):
            raise InvalidParameterError("rotation block of world_to_camera is not orthonormal")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidParameterError("camera width and height must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 < self.znear < self.zfar):
            raise InvalidParameterError("need 0 < znear < zfar")
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_camera", w2c)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": self.width, "height": self.height,
            "world_to_camera": self.world_to_camera.tolist(),
            "znear": float(self.znear), "zfar": float(self.zfar),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
            znear=float(d.get("znear", 0.01)), zfar=float(d.get("zfar", 100.0)),
        )

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(tuple(self.world_to_camera.ravel()) + (self.fx, self.fy, self.cx, self.cy, self.width, self.height))


def look_at(eye, target, up=(0.0, -1.0, 0.0)):
    """World-to-camera transform for a camera at ``eye`` looking at ``target``.

    ``up`` is the world direction that should appear towards the top of the
    image (negative camera y).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, -up)
    if np.linalg.norm(right) < 1e-9:
        raise InvalidParameterError("up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return w2c


@dataclass
class Projection:
    """Screen-space footprint of a batch of primitives for one camera.

    ``cov2d`` already includes the low-pass dilation. ``valid`` marks
    primitives inside the depth range; entries for invalid ones are
    unspecified.
    """

    means2d: np.ndarray
    cov2d: np.ndarray
    depths: np.ndarray
    valid: np.ndarray
    cam_points: np.ndarray
    jacobians: np.ndarray
    clamp_x: np.ndarray
    clamp_y: np.ndarray
    cov3d: np.ndarray


def project_gaussians(means, cov3d, cam):
    """EWA projection of 3D Gaussians into ``cam``.

    ``cov2d = J W cov3d W^T J^T + 0.3 I`` with W the camera rotation and J
    the perspective Jacobian at the camera-space mean.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    cov3d = np.asarray(cov3d, dtype=np.float64).reshape(-1, 3, 3)
    W = cam.rotation
    t = means @ W.T + cam.translation
    depths = t[:, 2]
    valid = (depths > cam.znear) & (depths < cam.zfar)
    z = np.where(valid, depths, 1.0)
    u = t[:, 0] / z
    v = t[:, 1] / z
    lo_x = (-_JACOBIAN_GUARD * cam.width - cam.cx) / cam.fx
    hi_x = ((1 + _JACOBIAN_GUARD) * cam.width - cam.cx) / cam.fx
    lo_y = (-_JACOBIAN_GUARD * cam.height - cam.cy) / cam.fy
    hi_y = ((1 + _JACOBIAN_GUARD) * cam.height - cam.cy) / cam.fy
    uc = np.clip(u, lo_x, hi_x)
    vc = np.clip(v, lo_y, hi_y)
    J = np.zeros((means.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * uc / z
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * vc / z
    M = J @ W
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION
    means2d = np.stack([cam.fx * u + cam.cx, cam.fy * v + cam.cy], axis=1)
    return Projection(
        means2d=means2d, cov2d=cov2d, depths=depths, valid=valid,
        cam_points=t, jacobians=J, clamp_x=(u != uc), clamp_y=(v != vc), cov3d=cov3d,
    )


def project_gaussian(mean, cov, cam):
    """Project one Gaussian; returns ``(mean2d, cov2d, depth)`` or None if culled."""
    mean = np.asarray(mean, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(mean)):
        raise InvalidParameterError("mean must be finite")
    proj = project_gaussians(mean[None], np.asarray(cov)[None], cam)
    if not proj.valid[0]:
        return None
    return proj.means2d[0], proj.cov2d[0], float(proj.depths[0])


def project_gaussians_vjp(proj, cam, dL_dmeans2d, dL_dcov2d):
    """Pull screen-space gradients back to world means and 3D covariances.

    Returns ``(dL_dmeans, dL_dcov3d)`` of shapes (P, 3) and (P, 3, 3). Rows of
    invalid primitives are zero.
    """
    W = cam.rotation
    J = proj.jacobians
    t = proj.cam_points
    z = np.where(proj.valid, proj.depths, 1.0)
    G = 0.5 * (dL_dcov2d + np.swapaxes(dL_dcov2d, 1, 2))
    M = J @ W
    dL_dcov3d = np.swapaxes(M, 1, 2) @ G @ M
    dL_dM = 2.0 * G @ M @ proj.cov3d
    dL_dJ = dL_dM @ W.T

    fx, fy = cam.fx, cam.fy
    u = t[:, 0] / z
    v = t[:, 1] / z
    dt = np.zeros_like(t)
    dt[:, 2] += -fx / z**2 * dL_dJ[:, 0, 0] - fy / z**2 * dL_dJ[:, 1, 1]
    # J02 = -fx*tx/tz^2 when free; with the ratio clamped it is -fx*c/tz.
    free_x = ~proj.clamp_x
    free_y = ~proj.clamp_y
    J02 = J[:, 0, 2]
    J12 = J[:, 1, 2]
    dt[:, 0] += np.where(free_x, -fx / z**2 * dL_dJ[:, 0, 2], 0.0)
    dt[:, 2] += np.where(free_x, 2.0 * fx * u / z**2, -J02 / z) * dL_dJ[:, 0, 2]
    dt[:, 1] += np.where(free_y, -fy / z**2 * dL_dJ[:, 1, 2], 0.0)
    dt[:, 2] += np.where(free_y, 2.0 * fy * v / z**2, -J12 / z) * dL_dJ[:, 1, 2]
    # means2d = (fx tx/tz + cx, fy ty/tz + cy)
    dt[:, 0] += fx / z * dL_dmeans2d[:, 0]
    dt[:, 1] += fy / z * dL_dmeans2d[:, 1]
    dt[:, 2] += -fx * t[:, 0] / z**2 * dL_dmeans2d[:, 0] - fy * t[:, 1] / z**2 * dL_dmeans2d[:, 1]
    dL_dmeans = dt @ W
    dL_dmeans[~proj.valid] = 0.0
    dL_dcov3d[~proj.valid] = 0.0
    return dL_dmeans, dL_dcov3d


def covariance_vjp(quats, log_scales, dL_dcov3d):
    """Pull ``dL/dcov3d`` back to raw quaternions and log-scales."""
    R = quaternion_to_rotation(quats)
    s = np.exp(log_scales)
    M = R * s[:, None, :]
    G = 0.5 * (dL_dcov3d + np.swapaxes(dL_dcov3d, 1, 2))
    dL_dM = 2.0 * G @ M
    # M = R diag(s): dL/ds_i = sum_r R_ri dL/dM_ri ; dL/dR = dL/dM diag(s)
    dL_ds = np.einsum("pri,pri->pi", R, dL_dM)
    dL_dR = dL_dM * s[:, None, :]
    return quaternion_rotation_vjp(quats, dL_dR), dL_ds * s
