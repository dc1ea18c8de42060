"""Differentiable forward splatting and its analytic backward pass.

Camera space follows the pinhole convention: x right, y down, z forward.
Pixel ``(x, y)`` (column, row) has its center at continuous image
coordinates ``(x, y)``.
"""

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import rotation

__all__ = [
    "Camera",
    "RenderSettings",
    "RenderedImage",
    "RenderGradients",
    "covariance_from",
    "project_covariance",
    "render",
    "render_backward",
]

COV2D_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        w2c = np.array(self.world_to_cam, dtype=float)
        if w2c.shape == (3, 4):
            w2c = np.vstack([w2c, [0.0, 0.0, 0.0, 1.0]])
        if w2c.shape != (4, 4):
            raise ValueError(f"world_to_cam must be 4x4, got {w2c.shape}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")
        w2c.setflags(write=False)
        object.__setattr__(self, "world_to_cam", w2c)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def rotation(self):
        return self.world_to_cam[:3, :3]

    @property
    def translation(self):
        return self.world_to_cam[:3, 3]

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height, principal_point=None):
        eye = np.asarray(eye, float)
        forward = np.asarray(target, float) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, float))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        if principal_point is None:
            principal_point = ((width - 1) / 2.0, (height - 1) / 2.0)
        fx, fy = np.broadcast_to(np.asarray(focal, float), (2,))
        return cls(float(fx), float(fy), float(principal_point[0]), float(principal_point[1]),
                   w2c, width, height)

    def scaled(self, factor):
        """Same view at ``factor`` times the resolution (pixel-center convention kept)."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        return Camera(self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5,
                      (self.cy + 0.5) * sy - 0.5, self.world_to_cam, w, h)

    def to_dict(self):
        return {
            "focal": [self.fx, self.fy],
            "principal_point": [self.cx, self.cy],
            "world_to_cam": self.world_to_cam.reshape(-1).tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        fx, fy = np.broadcast_to(np.asarray(d["focal"], float), (2,))
        cx, cy = d["principal_point"]
        return cls(float(fx), float(fy), float(cx), float(cy),
                   np.asarray(d["world_to_cam"], float).reshape(4, 4),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class RenderSettings:
    """Culling and filtering constants.

    ``RenderSettings.oracle()`` disables all of them so the output is the
    literal compositing sum.
    """

    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    low_pass: float = 0.3
    near: float = 1e-6
    background: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def oracle(cls, background=(0.0, 0.0, 0.0)):
        return cls(alpha_min=0.0, t_min=0.0, low_pass=0.0, background=tuple(background))


@dataclass
class RenderedImage:
    rgb: np.ndarray
    alpha: np.ndarray


@dataclass
class RenderGradients:
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray

    def as_dict(self):
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "scales": self.scales,
            "colors": self.colors,
            "opacities": self.opacities,
        }


def covariance_from(q, s):
    """``R diag(s)^2 R^T`` for one or many (quaternion, scale) pairs."""
    r = rotation.to_matrix(q)
    m = r * np.asarray(s, float)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def _clamp_eigen(cov2d, floor):
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    mid = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    low = mid - rad
    need = low < floor
    if not np.any(need):
        return cov2d
    vals, vecs = np.linalg.eigh(cov2d[need])
    vals = np.maximum(vals, floor)
    out = cov2d.copy()
    out[need] = (vecs * vals[..., None, :]) @ np.swapaxes(vecs, -1, -2)
    return out


def _jacobian(p_cam, camera):
    x, y, z = p_cam[..., 0], p_cam[..., 1], p_cam[..., 2]
    zero = np.zeros_like(z)
    return np.stack(
        [
            np.stack([camera.fx / z, zero, -camera.fx * x / (z * z)], axis=-1),
            np.stack([zero, camera.fy / z, -camera.fy * y / (z * z)], axis=-1),
        ],
        axis=-2,
    )


def project_covariance(cov, mu, camera, floor=COV2D_FLOOR):
    """Image-plane covariance ``J W cov W^T J^T`` of a Gaussian centred at ``mu``.

    Returns ``None`` when ``mu`` is not in front of the camera (culled).
    """
    p_cam = camera.rotation @ np.asarray(mu, float) + camera.translation
    if p_cam[2] <= 0:
        return None
    j = _jacobian(p_cam, camera)
    w = camera.rotation
    cov2d = j @ w @ np.asarray(cov, float) @ w.T @ j.T
    return _clamp_eigen(cov2d, floor)


def _attrs(gaussians):
    if isinstance(gaussians, dict):
        g = gaussians
    else:
        g = gaussians.attributes()
    return (np.asarray(g["positions"], float), np.asarray(g["rotations"], float),
            np.asarray(g["scales"], float), np.asarray(g["colors"], float),
            np.asarray(g["opacities"], float).reshape(-1))


@dataclass
class _Forward:
    rgb: np.ndarray
    alpha: np.ndarray
    # per-Gaussian projection state
    visible: np.ndarray = field(repr=False)
    p_cam: np.ndarray = field(repr=False)
    jac: np.ndarray = field(repr=False)
    cov_cam: np.ndarray = field(repr=False)
    conic: np.ndarray = field(repr=False)
    mean2d: np.ndarray = field(repr=False)
    # contributing (pixel, gaussian) pairs in compositing order, with the
    # alpha and the transmittance in front of each
    pix: np.ndarray = field(repr=False)
    gid: np.ndarray = field(repr=False)
    alpha_k: np.ndarray = field(repr=False)
    trans_k: np.ndarray = field(repr=False)


def _project(mu, q, s, camera, settings):
    p_cam = mu @ camera.rotation.T + camera.translation
    visible = p_cam[:, 2] > settings.near
    # cull early so J never divides by a tiny depth
    p_safe = np.where(visible[:, None], p_cam, [0.0, 0.0, 1.0])
    jac = _jacobian(p_safe, camera)
    cov_cam = camera.rotation @ covariance_from(q, s) @ camera.rotation.T
    cov2d = jac @ cov_cam @ np.swapaxes(jac, -1, -2)
    cov2d = cov2d + settings.low_pass * np.eye(2)
    cov2d = _clamp_eigen(cov2d, COV2D_FLOOR)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    mean2d = np.stack(
        [camera.fx * p_safe[:, 0] / p_safe[:, 2] + camera.cx,
         camera.fy * p_safe[:, 1] / p_safe[:, 2] + camera.cy],
        axis=-1,
    )
    return visible, p_cam, jac, cov_cam, cov2d, conic, mean2d


def _bounds(ids, cov2d, mean2d, opac, camera, settings):
    """Pixel box ``[x0, x1) x [y0, y1)`` outside which alpha < alpha_min."""
    w, h = camera.width, camera.height
    n = len(ids)
    if settings.alpha_min <= 0:
        return (np.zeros(n, np.int64), np.full(n, w, np.int64),
                np.zeros(n, np.int64), np.full(n, h, np.int64))
    qmax = 2.0 * np.log(opac[ids] / settings.alpha_min)
    rx = np.sqrt(qmax * cov2d[ids, 0, 0])
    ry = np.sqrt(qmax * cov2d[ids, 1, 1])
    x0 = np.clip(np.ceil(mean2d[ids, 0] - rx), 0, w).astype(np.int64)
    x1 = np.clip(np.floor(mean2d[ids, 0] + rx) + 1, 0, w).astype(np.int64)
    y0 = np.clip(np.ceil(mean2d[ids, 1] - ry), 0, h).astype(np.int64)
    y1 = np.clip(np.floor(mean2d[ids, 1] + ry) + 1, 0, h).astype(np.int64)
    return x0, x1, y0, y1


@njit(cache=True)
def _raster_forward(ids, x0, x1, y0, y1, mean2d, conic, opac, col, w, h, alpha_min, t_min):
    """Composite Gaussians ``ids`` (already in depth order) into per-pixel sums."""
    n_pix = w * h
    trans = np.ones(n_pix)
    rgb = np.zeros((n_pix, 3))
    cap = 0
    for k in range(len(ids)):
        cap += max(x1[k] - x0[k], 0) * max(y1[k] - y0[k], 0)
    pix = np.empty(cap, np.int64)
    gid = np.empty(cap, np.int64)
    alpha_k = np.empty(cap)
    trans_k = np.empty(cap)
    m = 0
    for k in range(len(ids)):
        g = ids[k]
        mx, my = mean2d[g, 0], mean2d[g, 1]
        ca, cb, cc = conic[g, 0], conic[g, 1], conic[g, 2]
        for y in range(y0[k], y1[k]):
            dy = y - my
            for x in range(x0[k], x1[k]):
                p = y * w + x
                t = trans[p]
                if t < t_min:
                    continue
                dx = x - mx
                power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
                if power > 0.0:
                    power = 0.0
                a = opac[g] * np.exp(power)
                if alpha_min > 0.0:
                    if a < alpha_min:
                        continue
                elif a <= 0.0:
                    continue
                for c in range(3):
                    rgb[p, c] += col[g, c] * a * t
                trans[p] = t * (1.0 - a)
                pix[m] = p
                gid[m] = g
                alpha_k[m] = a
                trans_k[m] = t
                m += 1
    return rgb, trans, pix[:m], gid[:m], alpha_k[:m], trans_k[:m]


@njit(cache=True)
def _raster_backward(pix, gid, alpha_k, trans_k, d_pix, mean2d, conic, opac, col, bg, w, n):
    """Per-pair chain rule, walking the pairs back to front.

    ``behind[p]`` holds the colour composited behind the current pair, so
    ``dC/dalpha_k = T_k (c_k - behind)`` needs no division by ``1 - alpha``.
    """
    n_pix = d_pix.shape[0]
    behind = np.empty((n_pix, 3))
    for p in range(n_pix):
        for c in range(3):
            behind[p, c] = bg[c]
    g_col = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    for k in range(len(pix) - 1, -1, -1):
        p = pix[k]
        g = gid[k]
        a = alpha_k[k]
        t = trans_k[k]
        d_alpha = 0.0
        for c in range(3):
            g_col[g, c] += a * t * d_pix[p, c]
            d_alpha += t * (col[g, c] - behind[p, c]) * d_pix[p, c]
            behind[p, c] = a * col[g, c] + (1.0 - a) * behind[p, c]
        dx = (p % w) - mean2d[g, 0]
        dy = (p // w) - mean2d[g, 1]
        ca, cb, cc = conic[g, 0], conic[g, 1], conic[g, 2]
        g_opac[g] += d_alpha * a / opac[g]
        da = d_alpha * a
        # d alpha / d mean2d = alpha * A d
        g_mean[g, 0] += da * (ca * dx + cb * dy)
        g_mean[g, 1] += da * (cb * dx + cc * dy)
        # d alpha / d conic entries (off-diagonal counted once per symmetric pair)
        g_conic[g, 0] += -0.5 * da * dx * dx
        g_conic[g, 1] += -da * dx * dy
        g_conic[g, 2] += -0.5 * da * dy * dy
    return g_col, g_opac, g_mean, g_conic


@dataclass
class Projection:
    """Per-view projection state; reusable while positions, rotations and scales are fixed."""

    visible: np.ndarray
    p_cam: np.ndarray
    jac: np.ndarray
    cov_cam: np.ndarray
    conic: np.ndarray
    mean2d: np.ndarray
    # Gaussians to composite, in depth order, with their pixel boxes
    ids: np.ndarray
    bounds: tuple


def project(gaussians, camera, settings=None):
    settings = settings or RenderSettings()
    mu, q, s, _, opac = _attrs(gaussians)
    visible, p_cam, jac, cov_cam, cov2d, conic, mean2d = _project(mu, q, s, camera, settings)
    ids = np.flatnonzero(visible & (opac > 0) & (opac >= settings.alpha_min))
    # depth order, ties broken by Gaussian index
    ids = ids[np.lexsort((ids, p_cam[ids, 2]))]
    bounds = _bounds(ids, cov2d, mean2d, opac, camera, settings)
    return Projection(visible, p_cam, jac, cov_cam, conic, mean2d, ids, bounds)


def _forward(gaussians, camera, settings, projection=None):
    mu, q, s, col, opac = _attrs(gaussians)
    n = len(mu)
    w, h = camera.width, camera.height
    bg = np.asarray(settings.background, float)
    if n == 0:
        e = np.zeros(0)
        return _Forward(
            rgb=np.tile(bg, (h, w, 1)), alpha=np.zeros((h, w)),
            visible=np.zeros(0, bool), p_cam=np.zeros((0, 3)), jac=np.zeros((0, 2, 3)),
            cov_cam=np.zeros((0, 3, 3)), conic=np.zeros((0, 3)), mean2d=np.zeros((0, 2)),
            pix=np.zeros(0, np.int64), gid=np.zeros(0, np.int64), alpha_k=e, trans_k=e,
        )
    pr = projection or project(gaussians, camera, settings)
    x0, x1, y0, y1 = pr.bounds
    rgb, trans, pix, gid, alpha_k, trans_k = _raster_forward(
        pr.ids, x0, x1, y0, y1, pr.mean2d, pr.conic, opac, np.ascontiguousarray(col), w, h,
        float(settings.alpha_min), float(settings.t_min))
    rgb = rgb + trans[:, None] * bg
    return _Forward(
        rgb=rgb.reshape(h, w, 3), alpha=(1.0 - trans).reshape(h, w),
        visible=pr.visible, p_cam=pr.p_cam, jac=pr.jac, cov_cam=pr.cov_cam, conic=pr.conic,
        mean2d=pr.mean2d, pix=pix, gid=gid, alpha_k=alpha_k, trans_k=trans_k,
    )


def render(gaussians, camera, settings=None):
    """Alpha-composite Gaussians front to back into an ``(h, w, 3)`` image."""
    fwd = _forward(gaussians, camera, settings or RenderSettings())
    return RenderedImage(fwd.rgb, fwd.alpha)


def render_backward(gaussians, camera, upstream, settings=None, forward=None,
                    geometry=True):
    """Gradients of ``sum(upstream * render(...).rgb)`` w.r.t. every attribute.

    Returns ``(RenderGradients, RenderedImage)``; the forward pass is
    recomputed unless supplied. With ``geometry=False`` only the colour and
    opacity gradients are filled in (the rest stay zero).
    """
    settings = settings or RenderSettings()
    mu, q, s, col, opac = _attrs(gaussians)
    n = len(mu)
    fwd = forward or _forward(gaussians, camera, settings)
    grads = RenderGradients(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                            np.zeros((n, 3)), np.zeros(n))
    image = RenderedImage(fwd.rgb, fwd.alpha)
    if n == 0 or len(fwd.pix) == 0:
        return grads, image

    bg = np.asarray(settings.background, float)
    d_pix = np.ascontiguousarray(np.asarray(upstream, float).reshape(-1, 3))
    g_col, g_opac, g_mean, g_conic = _raster_backward(
        fwd.pix, fwd.gid, fwd.alpha_k, fwd.trans_k, d_pix, fwd.mean2d, fwd.conic, opac,
        np.ascontiguousarray(col), bg, camera.width, n)
    grads.colors[:] = g_col
    grads.opacities[:] = g_opac
    if not geometry:
        return grads, image

    vis = fwd.visible
    g_a = np.zeros((n, 2, 2))
    g_a[:, 0, 0] = g_conic[:, 0]
    g_a[:, 0, 1] = g_a[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_a[:, 1, 1] = g_conic[:, 2]
    a_mat = np.empty((n, 2, 2))
    a_mat[:, 0, 0] = fwd.conic[:, 0]
    a_mat[:, 0, 1] = a_mat[:, 1, 0] = fwd.conic[:, 1]
    a_mat[:, 1, 1] = fwd.conic[:, 2]
    g_cov2d = -a_mat @ g_a @ a_mat

    jac, cov_cam = fwd.jac, fwd.cov_cam
    g_cov_cam = np.swapaxes(jac, -1, -2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ cov_cam

    p = np.where(vis[:, None], fwd.p_cam, [0.0, 0.0, 1.0])
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = camera.fx, camera.fy
    g_p = np.zeros((n, 3))
    g_p[:, 0] = g_mean[:, 0] * fx / z - g_jac[:, 0, 2] * fx / z**2
    g_p[:, 1] = g_mean[:, 1] * fy / z - g_jac[:, 1, 2] * fy / z**2
    g_p[:, 2] = (
        -g_mean[:, 0] * fx * x / z**2 - g_mean[:, 1] * fy * y / z**2
        - g_jac[:, 0, 0] * fx / z**2 + g_jac[:, 0, 2] * 2 * fx * x / z**3
        - g_jac[:, 1, 1] * fy / z**2 + g_jac[:, 1, 2] * 2 * fy * y / z**3
    )
    wr = camera.rotation
    grads.positions[:] = np.where(vis[:, None], g_p @ wr, 0.0)

    g_cov = wr.T @ g_cov_cam @ wr
    r = rotation.to_matrix(q)
    m = r * s[:, None, :]
    g_m = 2.0 * g_cov @ m
    grads.scales[:] = np.where(vis[:, None], np.einsum("nik,nik->nk", g_m, r), 0.0)
    g_r = g_m * s[:, None, :]
    grads.rotations[:] = np.where(vis[:, None], rotation.to_matrix_backward(q, g_r), 0.0)
    return grads, image
