"""Scalar objectives with analytic gradients.

Every function returns ``(value, gradient...)``. Double sums over ``i`` and
``j in one_ring(i)`` visit each undirected edge twice and are normalized by
``2 * n_e``.
"""

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import ndimage

from . import rotation
from .mesh import dihedral_angles, dihedral_angles_backward
from .render import RenderSettings, _forward, render_backward

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "FrameReference",
    "ssim",
    "image_loss",
    "multiview_image_loss",
    "scale_loss",
    "rigid_loss",
    "rot_loss",
    "iso_loss",
    "pos_loss",
    "flat_loss",
    "flat_loss_positions",
    "geo_loss",
]

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_SIGMA = 1.5
# residuals below this size (relative, for lengths) are rounding noise; |.| terms
# give them the zero subgradient instead of an arbitrary sign or direction
_KINK_TOL = 1e-12


@dataclass
class LossConfig:
    image: float = 0.2
    scale: float = 10.0
    rigid: float = 0.0
    rot: float = 20.0
    iso: float = 20.0
    pos: float = 1e3
    flat: float = 2e-4
    init_scale_cap: float = 1.5
    lambda_w: float | None = None
    ssim_window: int = 11

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("lambda_w",) and v is None:
                continue
            if v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")
        if self.image > 1:
            raise ValueError("image weight must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    terms: dict
    weights: dict
    total: float
    grads: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def phy(self):
        return sum(self.weights[k] * self.terms[k] for k in ("rigid", "rot", "iso"))

    @property
    def topo(self):
        return sum(self.weights[k] * self.terms[k] for k in ("pos", "flat"))


@dataclass(frozen=True, eq=False)
class FrameReference:
    """Frame-0 quantities shared by every later frame; never mutated."""

    positions: np.ndarray
    angles: np.ndarray
    angles_valid: np.ndarray
    scales: np.ndarray
    adjacency: object

    def __post_init__(self):
        for name in ("positions", "angles", "angles_valid", "scales"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


# --- image terms -----------------------------------------------------------

def _gaussian_kernel(size, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter(img, kernel):
    # zero-padded 'same' correlation; with a symmetric kernel it is self-adjoint
    out = ndimage.correlate1d(img, kernel, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


def _ssim_parts(x, y, window):
    kernel = _gaussian_kernel(window)
    mu_x = _filter(x, kernel)
    mu_y = _filter(y, kernel)
    var_x = _filter(x * x, kernel) - mu_x * mu_x
    var_y = _filter(y * y, kernel) - mu_y * mu_y
    cov = _filter(x * y, kernel) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    return kernel, mu_x, mu_y, a1, a2, b1, b2, smap


def _check_pair(rendered, target, window):
    rendered = np.asarray(rendered, float)
    target = np.asarray(target, float)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: rendered {rendered.shape} vs target {target.shape}")
    if rendered.ndim == 2:
        rendered, target = rendered[..., None], target[..., None]
    if window > min(rendered.shape[:2]):
        raise ValueError(f"SSIM window {window} exceeds image size {rendered.shape[:2]}")
    return rendered, target


def ssim(x, y, window=11):
    """Mean SSIM over pixels and channels (Gaussian window, sigma 1.5)."""
    x, y = _check_pair(x, y, window)
    vals = [_ssim_parts(x[..., c], y[..., c], window)[-1].mean() for c in range(x.shape[-1])]
    return float(np.mean(vals))


def image_loss(rendered, target, mask=None, weight=0.2, window=11):
    """``(1 - weight) * L1 + weight * (1 - SSIM) / 2`` and its gradient w.r.t. ``rendered``.

    ``mask`` is an optional ``(h, w)`` per-pixel weight in ``[0, 1]``
    applied to both terms; the result is a mask-weighted mean.
    """
    shape = np.shape(rendered)
    rendered, target = _check_pair(rendered, target, window)
    h, w, nc = rendered.shape
    if mask is None:
        m = np.ones((h, w))
    else:
        m = np.asarray(mask, float)
        if m.shape != (h, w):
            raise ValueError(f"mask shape {m.shape} does not match image {(h, w)}")
        if np.any(m < 0) or np.any(m > 1):
            raise ValueError("mask values must lie in [0, 1]")
    total_w = m.sum() * nc
    if total_w <= 0:
        return 0.0, np.zeros(shape)
    wmap = m / total_w

    diff = rendered - target
    l1 = float(np.sum(wmap[..., None] * np.abs(diff)))
    # residuals at rounding level take the zero subgradient of |.|
    sign = np.where(np.abs(diff) <= _KINK_TOL, 0.0, np.sign(diff))
    grad = (1.0 - weight) * wmap[..., None] * sign

    ssim_val = 0.0
    if weight > 0:
        for c in range(nc):
            x, y = rendered[..., c], target[..., c]
            kernel, mu_x, mu_y, a1, a2, b1, b2, smap = _ssim_parts(x, y, window)
            ssim_val += float(np.sum(wmap * smap))
            d_mu = 2.0 * mu_y * a2 / (b1 * b2) - smap * 2.0 * mu_x / b1
            d_var = -smap / b2
            d_cov = 2.0 * a1 / (b1 * b2)
            d_mu_total = d_mu - 2.0 * mu_x * d_var - mu_y * d_cov
            g_ssim = (_filter(wmap * d_mu_total, kernel)
                      + 2.0 * x * _filter(wmap * d_var, kernel)
                      + y * _filter(wmap * d_cov, kernel))
            grad[..., c] += -0.5 * weight * g_ssim
    dssim = 0.5 * (1.0 - ssim_val) if weight > 0 else 0.0
    value = (1.0 - weight) * l1 + weight * dssim
    return float(value), grad.reshape(shape)


def multiview_image_loss(gaussians, views, weight=0.2, window=11, settings=None,
                         projections=None):
    """Mean image loss over ``views`` with gradients w.r.t. every attribute.

    ``views`` holds ``(camera, target, mask)`` triples. Passing per-view
    ``projections`` (see :func:`topomesh.render.project`) declares the
    geometry fixed: they are reused and only colour and opacity gradients
    are computed.
    """
    settings = settings or RenderSettings()
    attrs = gaussians if isinstance(gaussians, dict) else gaussians.attributes()
    grads = {k: np.zeros_like(np.asarray(v, float)) for k, v in attrs.items()}
    total = 0.0
    nview = len(views)
    fixed = projections is not None
    for k, (camera, target, mask) in enumerate(views):
        fwd = _forward(attrs, camera, settings, projections[k] if fixed else None)
        value, g_img = image_loss(fwd.rgb, target, mask, weight, window)
        total += value / nview
        g, _ = render_backward(attrs, camera, g_img / nview, settings, forward=fwd,
                               geometry=not fixed)
        for k, v in g.as_dict().items():
            grads[k] += v
    return total, grads


# --- scale -----------------------------------------------------------------

def scale_loss(s, s_init, cap=1.5):
    """Sum over Gaussians of the smallest scale plus the hinge above ``cap * s_init``.

    Ties for the smallest component go to the highest axis index, which is
    the normal-aligned local axis of a freshly initialized Gaussian.
    """
    s = np.asarray(s, float)
    s_init = np.asarray(s_init, float)
    n = len(s)
    arg = s.shape[1] - 1 - np.argmin(s[:, ::-1], axis=1)
    over = s - cap * s_init
    value = float(s[np.arange(n), arg].sum() + np.maximum(over, 0.0).sum())
    grad = (over > 0).astype(float)
    grad[np.arange(n), arg] += 1.0
    return value, grad


# --- physical priors ---------------------------------------------------------

def _safe_unit(v, eps=1e-300):
    """Unit vectors and lengths; lengths at or below ``eps`` get a zero direction.

    ``eps`` may be per-row. A residual that is only rounding noise then
    takes the zero subgradient instead of an arbitrary unit direction.
    """
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    eps = np.asarray(eps, float)[..., None] if np.ndim(eps) else eps
    big = n > eps
    return np.where(big, v / np.where(big, n, 1.0), 0.0), n[..., 0]



def rigid_loss(prev_positions, prev_rotations, positions, rotations, adjacency):
    """Local rigidity between consecutive frames.

    Returns ``(value, d_positions, d_rotations)`` for the current frame; the
    previous frame is treated as constant.
    """
    pi, pj = adjacency.directed[:, 0], adjacency.directed[:, 1]
    w = adjacency.directed_w
    norm = 2.0 * adjacency.n_e
    r_prev = rotation.to_matrix(prev_rotations)
    r_cur = rotation.to_matrix(rotations)
    a = prev_positions[pj] - prev_positions[pi]
    b = positions[pj] - positions[pi]
    rel = r_prev[pi] @ np.swapaxes(r_cur[pi], -1, -2)
    resid = a - np.einsum("nij,nj->ni", rel, b)
    tol = _KINK_TOL * (np.linalg.norm(a, axis=1) + np.linalg.norm(b, axis=1))
    unit, length = _safe_unit(resid, tol)
    value = float(np.sum(w * length) / norm)

    coef = (w / norm)[:, None]
    g_b = -np.einsum("nji,nj->ni", rel, unit) * coef
    d_pos = np.zeros_like(positions, dtype=float)
    np.add.at(d_pos, pj, g_b)
    np.add.at(d_pos, pi, -g_b)
    # d/dR_cur of -u . (R_prev R_cur^T b) = -b (R_prev^T u)^T
    rpu = np.einsum("nji,nj->ni", r_prev[pi], unit)
    g_rcur = -coef[..., None] * b[:, :, None] * rpu[:, None, :]
    g_r = np.zeros((len(positions), 3, 3))
    np.add.at(g_r, pi, g_rcur)
    d_rot = rotation.to_matrix_backward(rotations, g_r)
    return value, d_pos, d_rot


def _relative_rotations(prev_rotations, rotations):
    qh = rotation.normalize(rotations)
    ph = rotation.normalize(prev_rotations)
    return rotation.multiply(qh, rotation.conjugate(ph)), qh, ph


def rot_loss(prev_rotations, rotations, adjacency):
    """Rotation similarity of one-ring neighbours between consecutive frames.

    The relative rotation of ``j`` is sign-aligned to that of ``i`` before
    differencing, so the value does not depend on quaternion double cover.
    """
    pi, pj = adjacency.directed[:, 0], adjacency.directed[:, 1]
    w = adjacency.directed_w
    norm = 2.0 * adjacency.n_e
    rel, qh, ph = _relative_rotations(prev_rotations, rotations)
    sign = np.where(np.einsum("ni,ni->n", rel[pj], rel[pi]) < 0, -1.0, 1.0)
    diff = sign[:, None] * rel[pj] - rel[pi]
    unit, length = _safe_unit(diff, _KINK_TOL)
    value = float(np.sum(w * length) / norm)

    g = unit * (w / norm)[:, None]
    g_rel = np.zeros_like(rel)
    np.add.at(g_rel, pj, sign[:, None] * g)
    np.add.at(g_rel, pi, -g)
    # rel = M_R(conj(ph)) qh
    m = rotation.right_matrix(rotation.conjugate(ph))
    g_qh = np.einsum("nji,nj->ni", m, g_rel)
    norms = np.linalg.norm(rotations, axis=-1, keepdims=True)
    return value, rotation.normalize_backward(qh, norms, g_qh)


def iso_loss(positions0, positions, adjacency):
    """Long-term isometry: change of one-ring edge lengths relative to frame 0."""
    pi, pj = adjacency.directed[:, 0], adjacency.directed[:, 1]
    w = adjacency.directed_w
    norm = 2.0 * adjacency.n_e
    l0 = np.linalg.norm(positions0[pj] - positions0[pi], axis=1)
    d = positions[pj] - positions[pi]
    unit, lt = _safe_unit(d)
    delta = l0 - lt
    value = float(np.sum(w * np.abs(delta)) / norm)
    kink = np.abs(delta) <= _KINK_TOL * (l0 + lt)
    g_len = -(w / norm) * np.where(kink, 0.0, np.sign(delta))
    g = g_len[:, None] * unit
    d_pos = np.zeros_like(positions, dtype=float)
    np.add.at(d_pos, pj, g)
    np.add.at(d_pos, pi, -g)
    return value, d_pos


# --- topological priors ------------------------------------------------------

def pos_loss(positions, adjacency):
    """Mean squared offset of each vertex from its one-ring centroid.

    Returns ``(value, d_positions, n_isolated)``; isolated vertices are skipped.
    """
    positions = np.asarray(positions, float)
    n_v = len(positions)
    pi, pj = adjacency.directed[:, 0], adjacency.directed[:, 1]
    deg = np.bincount(pi, minlength=n_v).astype(float)
    sums = np.zeros_like(positions)
    np.add.at(sums, pi, positions[pj])
    has = deg > 0
    centroid = np.where(has[:, None], sums / np.where(has, deg, 1.0)[:, None], positions)
    r = np.where(has[:, None], positions - centroid, 0.0)
    value = float(np.sum(r * r) / n_v)
    g = 2.0 * r / n_v
    d_pos = g.copy()
    share = g[pi] / deg[pi][:, None]
    np.add.at(d_pos, pj, -share)
    return value, d_pos, int(np.sum(~has))


def flat_loss(angles_t, angles_0, valid=None):
    """``sum(1 - cos(theta_t - theta_0))`` and ``d/d theta_t``; invalid entries are skipped."""
    angles_t = np.asarray(angles_t, float)
    angles_0 = np.asarray(angles_0, float)
    ok = np.isfinite(angles_t) & np.isfinite(angles_0)
    if valid is not None:
        ok &= np.asarray(valid, bool)
    d = np.where(ok, angles_t - angles_0, 0.0)
    value = float(np.sum(1.0 - np.cos(d)))
    return value, np.where(ok, np.sin(d), 0.0)


def flat_loss_positions(positions, reference, topology):
    """Flattening loss evaluated on positions, with the gradient through the angles.

    Returns ``(value, d_positions, n_invalid)``.
    """
    adjacency = reference.adjacency
    theta, valid = dihedral_angles(positions, adjacency, topology, return_valid=True)
    valid = valid & reference.angles_valid
    value, g_theta = flat_loss(theta, reference.angles, valid)
    d_pos = dihedral_angles_backward(positions, adjacency, topology, g_theta)
    return value, d_pos, int(np.sum(~valid))


# --- aggregate ---------------------------------------------------------------

def geo_loss(mesh, prev, reference, config, views=None, settings=None):
    """Geometry-stage objective.

    ``prev`` is ``(positions, rotations)`` of frame t-1. ``views`` are
    ``(camera, target, mask)`` triples; with no views the image term is 0.
    The breakdown carries per-attribute gradients of the weighted total.
    """
    adjacency = reference.adjacency
    n = mesh.n_v
    grads = {
        "positions": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "scales": np.zeros((n, 3)),
        "colors": np.zeros((n, 3)),
        "opacities": np.zeros(n),
    }
    terms = {}
    weights = {"image": 1.0, "rigid": config.rigid, "rot": config.rot, "iso": config.iso,
               "pos": config.pos, "flat": config.flat}

    if views:
        terms["image"], g = multiview_image_loss(mesh, views, config.image,
                                                 config.ssim_window, settings)
        for k in grads:
            grads[k] += g[k]
    else:
        terms["image"] = 0.0

    prev_pos, prev_rot = prev
    terms["rigid"], gp, gq = rigid_loss(prev_pos, prev_rot, mesh.positions, mesh.rotations,
                                        adjacency)
    grads["positions"] += config.rigid * gp
    grads["rotations"] += config.rigid * gq
    terms["rot"], gq = rot_loss(prev_rot, mesh.rotations, adjacency)
    grads["rotations"] += config.rot * gq
    terms["iso"], gp = iso_loss(reference.positions, mesh.positions, adjacency)
    grads["positions"] += config.iso * gp
    terms["pos"], gp, n_isolated = pos_loss(mesh.positions, adjacency)
    grads["positions"] += config.pos * gp
    terms["flat"], gp, n_invalid = flat_loss_positions(mesh.positions, reference, mesh.topology)
    grads["positions"] += config.flat * gp

    total = sum(weights[k] * terms[k] for k in terms)
    return LossBreakdown(terms, weights, float(total), grads,
                         {"isolated_vertices": n_isolated, "invalid_angles": n_invalid})
