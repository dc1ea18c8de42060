"""Synthetic scenes with known correspondence, plus independent oracles.

Nothing in the oracle functions here reuses the projection or compositing
code of :mod:`topomesh.render`; they are deliberately written from scratch.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import rotation
from .mesh import GaussianMesh, Topology, build_adjacency, min_ring_distance, vertex_normals
from .render import Camera, RenderSettings, render

__all__ = [
    "make_grid",
    "make_quad_sphere",
    "procedural_texture",
    "camera_rig",
    "deform_sequence",
    "ground_truth_gaussians",
    "make_sequence",
    "SyntheticSequence",
    "brute_force_composite",
    "finite_diff_gradient",
    "tracking_error",
    "TrackingReport",
    "psnr",
]

PRESETS = ("rigid", "bump", "stretch")


def make_grid(nx, ny, spacing=1.0):
    """Planar ``nx`` by ``ny`` quad patch in z=0, wound counter-clockwise seen from +z."""
    xs, ys = np.meshgrid(np.arange(nx + 1) * spacing, np.arange(ny + 1) * spacing)
    positions = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    faces = np.stack(
        [idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel(), idx[1:, :-1].ravel()],
        axis=1,
    )
    uv = np.stack([xs.ravel() / max(nx * spacing, 1e-300),
                   ys.ravel() / max(ny * spacing, 1e-300)], axis=1)
    return Topology(faces, uv, len(positions)), positions


def _sphere_uv(directions, pole):
    """Azimuthal-equidistant chart around ``pole``: one UV per vertex, inside [0.01, 0.99]^2."""
    pole = np.asarray(pole, float)
    pole = pole / np.linalg.norm(pole)
    helper = np.array([1.0, 0.0, 0.0]) if abs(pole[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, pole)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(pole, e1)
    theta = np.arccos(np.clip(directions @ pole, -1.0, 1.0))
    phi = np.arctan2(directions @ e2, directions @ e1)
    r = 0.49 * theta / math.pi
    return np.stack([0.5 + r * np.cos(phi), 0.5 + r * np.sin(phi)], axis=1)


def make_quad_sphere(subdivision, radius=1.0, uv_pole=(0.13, 0.21, 1.0)):
    """Cube-to-sphere quad mesh.

    Each cube face is split into ``subdivision**2`` quads at equal angular
    steps and projected to the sphere, giving ``6 s^2`` faces and ``6 s^2 + 2`` vertices, outward wound.
    UVs come from a single azimuthal chart around ``uv_pole``; the quad
    containing the opposite point is folded in UV space and is skipped when
    baking.
    """
    s = int(subdivision)
    if s < 1:
        raise ValueError("subdivision must be >= 1")
    # equiangular ticks keep the projected quads close to equal area
    ticks = np.tan(np.linspace(-0.25 * math.pi, 0.25 * math.pi, s + 1))
    ticks[0], ticks[-1] = -1.0, 1.0
    keys = {}
    points = []
    faces = []

    def vid(p):
        key = tuple(np.round(p * 1e9).astype(np.int64))
        if key not in keys:
            keys[key] = len(points)
            points.append(p)
        return keys[key]

    # (normal axis, sign); u/v axes chosen so u x v = outward normal
    for axis in range(3):
        for sign in (1.0, -1.0):
            a, b = (axis + 1) % 3, (axis + 2) % 3
            if sign < 0:
                a, b = b, a
            for i in range(s):
                for j in range(s):
                    corners = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign
                        p[a] = ticks[i + di]
                        p[b] = ticks[j + dj]
                        corners.append(vid(p))
                    faces.append(corners)
    cube = np.array(points)
    directions = cube / np.linalg.norm(cube, axis=1, keepdims=True)
    uv = _sphere_uv(directions, uv_pole)
    topo = Topology(np.array(faces), uv, len(points))
    return topo, radius * directions


def procedural_texture(resolution, kind="checker", frequency=4, seed=0):
    """Bandlimited checkerboard with low-frequency mottling, as an ``(R, R, 3)`` image.

    Texel ``(x, y)`` samples ``u = (x + 0.5) / R``, ``v = (y + 0.5) / R``.
    ``kind="flat"`` gives a single colour (the adversarial preset where
    tracking has nothing to lock onto).
    """
    r = int(resolution)
    t = (np.arange(r) + 0.5) / r
    u, v = np.meshgrid(t, t)
    return texture_function(kind, frequency, seed)(u, v)


def texture_function(kind="checker", frequency=4, seed=0):
    """Closed-form texture ``f(u, v) -> rgb`` matching :func:`procedural_texture`."""
    if kind == "flat":
        return lambda u, v: np.broadcast_to(np.array([0.7, 0.55, 0.45]),
                                            np.shape(u) + (3,)).copy()
    if kind != "checker":
        raise ValueError(f"unknown texture kind {kind!r}")
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.35, 0.65, 3)
    amp = rng.uniform(0.2, 0.3, 3) * rng.choice([-1.0, 1.0], 3)
    mott = [(rng.uniform(0.5, 1.5, 2), rng.uniform(0, 2 * math.pi, 2), rng.uniform(0.02, 0.06, 3))
            for _ in range(3)]
    f = float(frequency)

    def tex(u, v):
        u = np.asarray(u, float)[..., None]
        v = np.asarray(v, float)[..., None]
        out = base + amp * np.sin(2 * math.pi * f * u) * np.sin(2 * math.pi * f * v)
        for k, ph, a in mott:
            out = out + a * np.sin(2 * math.pi * k[0] * u + ph[0]) * np.cos(
                2 * math.pi * k[1] * v + ph[1])
        return np.clip(out, 0.0, 1.0)

    return tex


def camera_rig(n_cameras=6, distance=4.0, elevations=(30.0, 5.0), focal=None, size=64,
               target=(0.0, 0.0, 0.0), object_radius=1.0):
    """Cameras on a ring around ``target``, alternating between ``elevations`` (degrees).

    World +z is up. The default focal length frames a sphere of
    ``object_radius`` at about 70% of the image width.
    """
    if not 2 <= n_cameras <= 16:
        raise ValueError("camera count must lie in [2, 16]")
    if focal is None:
        half_angle = math.asin(min(object_radius / distance, 0.99))
        focal = 0.35 * size / math.tan(half_angle)
    cams = []
    for k in range(n_cameras):
        az = 2 * math.pi * k / n_cameras
        el = math.radians(elevations[k % len(elevations)])
        eye = np.asarray(target, float) + distance * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, target, (0.0, 0.0, 1.0), focal, size, size))
    return cams


def _envelope(t, frames):
    """Piecewise-linear rise to 1 at the middle frame and back to 0 at the last."""
    peak = (frames - 1) // 2
    if frames < 2 or peak == 0:
        return 1.0 if t > 0 else 0.0
    if t <= peak:
        return t / peak
    return (frames - 1 - t) / (frames - 1 - peak)


def deform_sequence(positions, topology, preset, frames, magnitude, axis=(0.0, 0.0, 1.0),
                    center=(1.0, 0.3, 0.4), bump_radius=0.9):
    """Deterministic per-frame vertex positions; frame 0 is ``positions``.

    Presets and their accepted magnitudes:

    rigid
        rotation by ``magnitude`` degrees per frame about ``axis`` through the
        centroid, ``|magnitude| <= 30``.
    bump
        vertices within ``bump_radius`` radians (seen from the centroid) of
        the vertex closest to ``center`` move along their frame-0 normals by
        ``magnitude * cos^2`` falloff times a temporal envelope peaking at
        the middle frame; ``|magnitude| <= 0.25`` times the bounding radius.
    stretch
        x-axis scaled by ``1 + magnitude * t / (frames - 1)``,
        ``-0.5 < magnitude <= 1``.
    """
    p0 = np.asarray(positions, float)
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    centroid = p0.mean(axis=0)
    out = []
    if preset == "rigid":
        if abs(magnitude) > 30:
            raise ValueError("rigid magnitude must satisfy |degrees per frame| <= 30")
        for t in range(frames):
            q = rotation.from_axis_angle(axis, math.radians(magnitude * t))
            r = rotation.to_matrix(q)
            out.append((p0 - centroid) @ r.T + centroid)
    elif preset == "bump":
        extent = np.linalg.norm(p0 - centroid, axis=1).max()
        if abs(magnitude) > 0.25 * extent:
            raise ValueError(f"bump magnitude must satisfy |m| <= {0.25 * extent:.4g}")
        dirs = (p0 - centroid) / np.linalg.norm(p0 - centroid, axis=1, keepdims=True)
        c = np.asarray(center, float)
        apex = int(np.argmax(dirs @ (c / np.linalg.norm(c))))
        ang = np.arccos(np.clip(dirs @ dirs[apex], -1.0, 1.0))
        profile = np.where(ang < bump_radius, np.cos(0.5 * math.pi * ang / bump_radius) ** 2, 0.0)
        normals = vertex_normals(p0, topology)
        for t in range(frames):
            out.append(p0 + (magnitude * _envelope(t, frames) * profile)[:, None] * normals)
    else:
        if not -0.5 < magnitude <= 1.0:
            raise ValueError("stretch magnitude must satisfy -0.5 < m <= 1")
        for t in range(frames):
            k = 1.0 + magnitude * (t / (frames - 1) if frames > 1 else 0.0)
            p = p0 - centroid
            p[:, 0] *= k
            out.append(p + centroid)
    return out


def sample_uv(texture, uv):
    """Bilinear lookup in an ``(R, R, 3)`` texture at per-vertex UVs (texel-center convention)."""
    from .dense import sample_texture

    return sample_texture(texture, uv)


def ground_truth_gaussians(positions, topology, colors, base_scales, previous_normals=None,
                           frame_index=0):
    """Gaussians at ``positions`` whose local +z follows the deformed vertex normals."""
    normals = vertex_normals(positions, topology, previous=previous_normals)
    return GaussianMesh(positions, rotation.shortest_arc(normals), base_scales, colors,
                        np.ones(len(positions)), topology, frame_index)


@dataclass
class SyntheticSequence:
    frames: list
    topology: Topology
    texture: np.ndarray
    cameras: list
    images: list
    gaussians: list = field(default_factory=list)
    settings: RenderSettings = field(default_factory=RenderSettings)


# Scene units: the loss weights are absolute, so the object size fixes their
# balance. A 1 cm sphere gives edge lengths of a few mm, the regime where the
# default weights let the image term lead and the priors regularize.
HARNESS_RADIUS = 0.01


def make_sequence(subdivision=3, preset="bump", frames=10, magnitude=None, n_cameras=6,
                  image_size=64, texture_kind="checker", texture_resolution=256,
                  frequency=4, seed=0, radius=HARNESS_RADIUS, tangent_scale=1.25,
                  normal_scale=0.05, settings=None, **deform_kwargs):
    """Ground-truth sequence rendered by :func:`topomesh.render.render`.

    ``magnitude`` defaults to ``0.1 * radius`` for ``bump`` and ``stretch``
    and 2 degrees per frame for ``rigid``. Ground-truth Gaussians have
    tangent scale ``tangent_scale * s0`` and normal scale
    ``normal_scale * s0``, where ``s0`` is half the frame-0 minimum one-ring
    distance (the tracker's own initial scale).
    """
    settings = settings or RenderSettings()
    if magnitude is None:
        magnitude = {"rigid": 2.0, "bump": 0.1 * radius, "stretch": 0.1}.get(preset, 0.0)
    topo, p0 = make_quad_sphere(subdivision, radius)
    texture = procedural_texture(texture_resolution, texture_kind, frequency, seed)
    colors = sample_uv(texture, topo.uv)
    adjacency = build_adjacency(topo, p0)
    s0 = 0.5 * min_ring_distance(p0, adjacency)
    scales = np.stack([tangent_scale * s0, tangent_scale * s0, normal_scale * s0], axis=1)
    positions = deform_sequence(p0, topo, preset, frames, magnitude, **deform_kwargs)
    cams = camera_rig(n_cameras, distance=4.0 * radius, size=image_size, object_radius=radius)
    gaussians, images = [], []
    normals = None
    for t, p in enumerate(positions):
        g = ground_truth_gaussians(p, topo, colors, scales, normals, t)
        normals = vertex_normals(p, topo, previous=normals)
        gaussians.append(g)
        images.append([render(g, cam, settings).rgb for cam in cams])
    return SyntheticSequence(positions, topo, texture, cams, images, gaussians, settings)


# --- oracles -------------------------------------------------------------------

def _quat_rotate(q, v):
    w, x, y, z = q / math.sqrt(sum(c * c for c in q))
    # v' = q v q^*, expanded for a pure quaternion v
    tx = 2 * (y * v[2] - z * v[1])
    ty = 2 * (z * v[0] - x * v[2])
    tz = 2 * (x * v[1] - y * v[0])
    return np.array([
        v[0] + w * tx + (y * tz - z * ty),
        v[1] + w * ty + (z * tx - x * tz),
        v[2] + w * tz + (x * ty - y * tx),
    ])


def brute_force_composite(gaussians, camera, pixel, background=(0.0, 0.0, 0.0)):
    """Literal front-to-back compositing at one pixel: no culling, truncation or filtering.

    ``pixel`` is ``(column, row)``.
    """
    attrs = gaussians if isinstance(gaussians, dict) else gaussians.attributes()
    mus = np.asarray(attrs["positions"], float)
    qs = np.asarray(attrs["rotations"], float)
    ss = np.asarray(attrs["scales"], float)
    cs = np.asarray(attrs["colors"], float)
    ops = np.asarray(attrs["opacities"], float).reshape(-1)
    w2c = np.asarray(camera.world_to_cam, float)
    px, py = float(pixel[0]), float(pixel[1])
    hits = []
    for k in range(len(mus)):
        hom = w2c @ np.append(mus[k], 1.0)
        x, y, z = hom[:3]
        if z <= 0:
            continue
        # columns of R are the rotated basis vectors
        rot = np.stack([_quat_rotate(qs[k], e) for e in np.eye(3)], axis=1)
        cov = sum(ss[k][a] ** 2 * np.outer(rot[:, a], rot[:, a]) for a in range(3))
        cov_cam = w2c[:3, :3] @ cov @ w2c[:3, :3].T
        jac = np.array([[camera.fx / z, 0.0, -camera.fx * x / z**2],
                        [0.0, camera.fy / z, -camera.fy * y / z**2]])
        c2 = jac @ cov_cam @ jac.T
        det = c2[0, 0] * c2[1, 1] - c2[0, 1] * c2[1, 0]
        inv = np.array([[c2[1, 1], -c2[0, 1]], [-c2[1, 0], c2[0, 0]]]) / det
        d = np.array([px - (camera.fx * x / z + camera.cx), py - (camera.fy * y / z + camera.cy)])
        alpha = ops[k] * math.exp(-0.5 * float(d @ inv @ d))
        hits.append((z, k, alpha))
    hits.sort(key=lambda h: (h[0], h[1]))
    color = np.zeros(3)
    trans = 1.0
    for _, k, alpha in hits:
        color += cs[k] * alpha * trans
        trans *= 1.0 - alpha
    return color + trans * np.asarray(background, float)


def finite_diff_gradient(func, params, h=1e-6):
    """Central-difference gradient of scalar ``func`` at array ``params``.

    ``h`` may be a scalar or an array broadcastable to ``params``.
    """
    x = np.array(params, dtype=float)
    steps = np.broadcast_to(np.asarray(h, float), x.shape)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + steps[idx]
        fp = func(x.copy())
        x[idx] = orig - steps[idx]
        fm = func(x.copy())
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at component {idx}")
        grad[idx] = (fp - fm) / (2.0 * steps[idx])
    return grad


# --- metrics -------------------------------------------------------------------

@dataclass
class TrackingReport:
    mean_error: list
    median_error: list
    max_error: list
    adjacent_rmse: list
    gt_adjacent_rmse: list
    mean_edge_length: float
    texture_adjacent_psnr: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mean_edge_length": self.mean_edge_length,
            "frames": [
                {
                    "frame": t,
                    "mean_error": self.mean_error[t],
                    "median_error": self.median_error[t],
                    "max_error": self.max_error[t],
                    "adjacent_rmse": self.adjacent_rmse[t],
                    "gt_adjacent_rmse": self.gt_adjacent_rmse[t],
                    "texture_adjacent_psnr": (self.texture_adjacent_psnr[t]
                                              if t < len(self.texture_adjacent_psnr) else None),
                }
                for t in range(len(self.mean_error))
            ],
        }


def _adjacent_rmse(frames):
    out = [0.0]
    for a, b in zip(frames[:-1], frames[1:]):
        out.append(float(np.sqrt(np.mean(np.sum((b - a) ** 2, axis=1)))))
    return out


def psnr(a, b, mask=None, peak=1.0):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if mask is not None:
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def tracking_error(tracked, ground_truth, topology, textures=None):
    """Per-frame vertex error as a fraction of the mean frame-0 edge length.

    ``textures`` (optional) adds the PSNR between consecutive texture maps.
    """
    if len(tracked) != len(ground_truth):
        raise ValueError(f"frame count mismatch: {len(tracked)} tracked vs "
                         f"{len(ground_truth)} ground truth")
    tracked = [np.asarray(t, float) for t in tracked]
    ground_truth = [np.asarray(g, float) for g in ground_truth]
    edges = topology.edges
    g0 = ground_truth[0]
    mean_edge = float(np.linalg.norm(g0[edges[:, 1]] - g0[edges[:, 0]], axis=1).mean())
    mean_e, med_e, max_e = [], [], []
    for t, g in zip(tracked, ground_truth):
        if t.shape != g.shape:
            raise ValueError(f"vertex count mismatch: {t.shape} vs {g.shape}")
        err = np.linalg.norm(t - g, axis=1) / mean_edge
        mean_e.append(float(err.mean()))
        med_e.append(float(np.median(err)))
        max_e.append(float(err.max()))
    tex_psnr = []
    if textures is not None:
        tex_psnr = [math.inf] + [psnr(a, b) for a, b in zip(textures[:-1], textures[1:])]
    return TrackingReport(mean_e, med_e, max_e, _adjacent_rmse(tracked),
                          _adjacent_rmse(ground_truth), mean_edge, tex_psnr)
