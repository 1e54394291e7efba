"""Camera model, quaternion algebra, 3D covariances and their perspective projection.

Every forward map here has a hand-written reverse-mode counterpart. All arrays are
float64 and batched along the leading axis (N Gaussians).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError, InvalidInputError, InvalidParameterError

NEAR_PLANE = 0.01
COV2D_BLUR = 0.3
_QUAT_EPS = 1e-12


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    Camera space follows the OpenCV convention: +z forward, +x right, +y down.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise InvalidInputError("camera width and height must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("camera focal lengths must be positive")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or np.linalg.det(rot) < 0:
            raise InvalidInputError("camera rotation must be orthonormal with det +1")

    @classmethod
    def look_at(cls, eye, target, up, width, height, fx, fy=None, cx=None, cy=None):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            width=int(width),
            height=int(height),
            fx=float(fx),
            fy=float(fx if fy is None else fy),
            cx=float(width / 2 if cx is None else cx),
            cy=float(height / 2 if cy is None else cy),
            rotation=rot,
            translation=-rot @ eye,
        )

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**{k: d[k] for k in ("width", "height", "fx", "fy", "cx", "cy", "rotation", "translation")})


@dataclass
class Splat2D:
    """Screen-space footprint of one or many Gaussians (batched on axis 0)."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    visible: np.ndarray


def _as_batch(a, width):
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    return a.reshape(-1, width), single


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm <= _QUAT_EPS):
        raise InvalidParameterError("degenerate quaternion (norm <= 1e-12)")
    return q / norm, norm


def _rotmat_from_unit(u):
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    R = np.empty((u.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat(q):
    """Rotation matrix of ``q / |q|``; ``q`` is (w, x, y, z), shape (4,) or (N, 4)."""
    qb, single = _as_batch(q, 4)
    u, _ = normalize_quat(qb)
    R = _rotmat_from_unit(u)
    return R[0] if single else R


def _rotmat_unit_vjp(u, gR):
    """Pull a gradient on R back to the unit quaternion components."""
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    g = gR
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


def quat_normalize_vjp(u, norm, gu):
    """Gradient w.r.t. the raw quaternion given the gradient on ``u = q/|q|``."""
    return (gu - u * np.sum(u * gu, axis=1, keepdims=True)) / norm


def build_covariance(q, log_scale):
    """``R S S^T R^T`` with ``S = diag(exp(log_scale))``. Batched or single."""
    qb, single = _as_batch(q, 4)
    lsb, _ = _as_batch(log_scale, 3)
    if not (np.all(np.isfinite(qb)) and np.all(np.isfinite(lsb))):
        raise InvalidInputError("non-finite rotation or scale")
    R = quat_to_rotmat(qb)
    s2 = np.exp(2.0 * lsb)
    sigma = np.einsum("nij,nj,nkj->nik", R, s2, R)
    sigma = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
    return sigma[0] if single else sigma


@dataclass
class ProjectionContext:
    positions: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    unit: np.ndarray
    norm: np.ndarray
    R: np.ndarray
    s2: np.ndarray
    cam_pts: np.ndarray
    J: np.ndarray
    M: np.ndarray
    visible: np.ndarray
    camera: Camera


def project_gaussians(positions, quats, log_scales, cam: Camera, near=NEAR_PLANE, blur=COV2D_BLUR):
    """Project N Gaussians into ``cam``.

    Returns ``(Splat2D, ctx)``. Splats with camera depth at or in front of the
    near plane are marked invisible and get zero footprint and zero gradient.
    """
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = x.shape[0]
    qb = np.asarray(quats, dtype=np.float64).reshape(n, 4)
    ls = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
    u, norm = normalize_quat(qb)
    R = _rotmat_from_unit(u)
    s2 = np.exp(2.0 * ls)
    sigma = np.einsum("nij,nj,nkj->nik", R, s2, R)

    W = cam.rotation
    t = x @ W.T + cam.translation
    visible = t[:, 2] > near
    tz = np.where(visible, t[:, 2], 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / tz
    J[:, 0, 2] = -cam.fx * t[:, 0] / tz**2
    J[:, 1, 1] = cam.fy / tz
    J[:, 1, 2] = -cam.fy * t[:, 1] / tz**2
    M = np.einsum("ij,njk,lk->nil", W, sigma, W)
    cov2d = np.einsum("nij,njk,nlk->nil", J, M, J)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += blur
    cov2d[:, 1, 1] += blur

    mean2d = np.stack([cam.fx * t[:, 0] / tz + cam.cx, cam.fy * t[:, 1] / tz + cam.cy], axis=1)
    mean2d[~visible] = 0.0
    cov2d[~visible] = 0.0
    splats = Splat2D(mean2d=mean2d, cov2d=cov2d, depth=t[:, 2].copy(), visible=visible)
    ctx = ProjectionContext(x, qb, ls, u, norm, R, s2, t, J, M, visible, cam)
    return splats, ctx


def project_gaussian(x, sigma, cam: Camera, near=NEAR_PLANE, blur=COV2D_BLUR):
    """Project one Gaussian given its world covariance. Returns ``None`` when culled."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(3, 3)
    W = cam.rotation
    t = W @ x + cam.translation
    if t[2] <= near:
        return None
    J = np.array([
        [cam.fx / t[2], 0.0, -cam.fx * t[0] / t[2] ** 2],
        [0.0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2],
    ])
    cov2d = J @ W @ sigma @ W.T @ J.T
    cov2d = 0.5 * (cov2d + cov2d.T) + blur * np.eye(2)
    mean2d = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
    return Splat2D(mean2d=mean2d, cov2d=cov2d, depth=np.float64(t[2]), visible=np.bool_(True))


def geometry_backward(ctx: ProjectionContext, grad_mean2d, grad_cov2d):
    """Reverse-mode through projection and covariance construction.

    ``grad_cov2d`` is the gradient w.r.t. every entry of the 2x2 matrix treated
    independently. Returns gradients for (positions, quats, log_scales).
    """
    n = ctx.positions.shape[0]
    gm = np.asarray(grad_mean2d, dtype=np.float64)
    gc = np.asarray(grad_cov2d, dtype=np.float64)
    if gm.shape != (n, 2) or gc.shape != (n, 2, 2):
        raise ContractError(f"upstream gradients do not match a forward call over {n} splats")

    cam = ctx.camera
    W = cam.rotation
    vis = ctx.visible
    gm = np.where(vis[:, None], gm, 0.0)
    gc = np.where(vis[:, None, None], gc, 0.0)
    t = ctx.cam_pts
    tz = np.where(vis, t[:, 2], 1.0)
    J, M = ctx.J, ctx.M

    gJ = np.einsum("nij,njk,nkl->nil", gc, J, np.swapaxes(M, 1, 2)) + np.einsum(
        "nji,njk,nkl->nil", gc, J, M
    )
    gM = np.einsum("nji,njk,nkl->nil", J, gc, J)

    gt = np.zeros((n, 3))
    gt[:, 0] = gm[:, 0] * cam.fx / tz
    gt[:, 1] = gm[:, 1] * cam.fy / tz
    gt[:, 2] = -(gm[:, 0] * cam.fx * t[:, 0] + gm[:, 1] * cam.fy * t[:, 1]) / tz**2
    tz2, tz3 = tz**2, tz**3
    gt[:, 0] += -gJ[:, 0, 2] * cam.fx / tz2
    gt[:, 1] += -gJ[:, 1, 2] * cam.fy / tz2
    gt[:, 2] += (
        -gJ[:, 0, 0] * cam.fx / tz2
        + gJ[:, 0, 2] * 2 * cam.fx * t[:, 0] / tz3
        - gJ[:, 1, 1] * cam.fy / tz2
        + gJ[:, 1, 2] * 2 * cam.fy * t[:, 1] / tz3
    )
    gx = gt @ W

    gS = np.einsum("ji,njk,kl->nil", W, gM, W)
    R, s2 = ctx.R, ctx.s2
    RD = R * s2[:, None, :]
    gR = np.einsum("nij,njk->nik", gS, RD) + np.einsum("nji,njk->nik", gS, RD)
    RtgR = np.einsum("nji,njk,nki->ni", R, gS, R)
    gls = 2.0 * RtgR * s2
    gu = _rotmat_unit_vjp(ctx.unit, gR)
    gq = quat_normalize_vjp(ctx.unit, ctx.norm, gu)
    gq[~vis] = 0.0
    gls[~vis] = 0.0
    return gx, gq, gls
