"""Stage orchestration: first-frame init, per-frame tracking, per-frame texture fitting."""

import hashlib
import logging
from dataclasses import dataclass, field, fields

import numpy as np
from PIL import Image

from . import rotation
from .dense import refresh_dense_positions, sample_texture
from .losses import FrameReference, geo_loss, multiview_image_loss, scale_loss
from .mesh import GaussianMesh, build_adjacency, dihedral_angles, min_ring_distance, vertex_normals
from .render import project

__all__ = [
    "ATTRIBUTES",
    "StageSchedule",
    "SequenceState",
    "OptimizationError",
    "Adam",
    "adam_step",
    "make_views",
    "scene_scale",
    "initial_gaussians",
    "frame_reference",
    "init_first_frame",
    "start_sequence",
    "track_frame",
    "optimize_texture_frame",
    "reference_checksum",
]

log = logging.getLogger(__name__)

ATTRIBUTES = ("positions", "rotations", "scales", "colors", "opacities")
STAGES = ("init", "geometry", "texture")


class OptimizationError(RuntimeError):
    """Non-finite loss or gradient; ``snapshot`` holds the offending state."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class StageSchedule:
    """Which attributes each stage optimizes, with learning rates and iteration counts.

    ``positions`` and ``scales`` learning rates are multiplied by the scene
    scale at run time, since both are lengths.
    """

    init_iterations: int = 200
    geometry_iterations: int = 300
    texture_iterations: int = 150
    lr_positions: float = 1.6e-4
    # positions decay log-linearly to this rate over each stage's iterations
    lr_positions_final: float = 1.6e-6
    lr_rotations: float = 1e-3
    lr_scales: float = 5e-3
    lr_colors: float = 2.5e-3
    release_colors: bool = True
    texture_rotations: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scale_floor: float = 1e-7
    # besides the penalty, project init-stage scales onto cap * s_init after each step
    hard_scale_cap: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                continue
            if v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def trainable(self, stage):
        if stage == "init":
            return ("rotations", "scales")
        if stage == "geometry":
            return ("positions", "rotations") + (("colors",) if self.release_colors else ())
        if stage == "texture":
            return ("colors",) + (("rotations",) if self.texture_rotations else ())
        raise ValueError(f"unknown stage {stage!r}")

    def iterations(self, stage):
        return {"init": self.init_iterations, "geometry": self.geometry_iterations,
                "texture": self.texture_iterations}[stage]

    def position_lr(self, scene, step, total):
        if total <= 1 or self.lr_positions_final <= 0 or self.lr_positions <= 0:
            return self.lr_positions * scene
        frac = step / (total - 1)
        return scene * float(np.exp((1 - frac) * np.log(self.lr_positions)
                                    + frac * np.log(self.lr_positions_final)))

    def learning_rates(self, scene):
        return {"positions": self.lr_positions * scene, "rotations": self.lr_rotations,
                "scales": self.lr_scales * scene, "colors": self.lr_colors, "opacities": 0.0}

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SequenceState:
    frame_index: int
    mesh: GaussianMesh
    reference: FrameReference
    history: list = field(default_factory=list)
    dense: object = None


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; ``t`` is the 1-based step. Returns ``(param, m, v)``."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a dict of named arrays, updated in place.

    Attributes outside ``trainable`` are skipped entirely: their values and
    moments are never touched.
    """

    def __init__(self, lrs, trainable, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = dict(lrs)
        self.trainable = tuple(trainable)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.moments = {}

    def step(self, params, grads):
        for name in self.trainable:
            if not np.all(np.isfinite(grads[name])):
                raise OptimizationError(f"non-finite gradient for {name}")
        self.t += 1
        for name in self.trainable:
            p = params[name]
            m, v = self.moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
            new, m, v = adam_step(p, grads[name], m, v, self.t, self.lrs[name],
                                  self.beta1, self.beta2, self.eps)
            self.moments[name] = (m, v)
            p[...] = new


def _project(mesh, trainable, floor, ceiling=None):
    if "rotations" in trainable:
        mesh.rotations[...] = rotation.normalize(mesh.rotations)
    if "scales" in trainable:
        if ceiling is not None:
            np.minimum(mesh.scales, ceiling, out=mesh.scales)
        np.maximum(mesh.scales, floor, out=mesh.scales)
    if "colors" in trainable:
        np.clip(mesh.colors, 0.0, 1.0, out=mesh.colors)


def scene_scale(cameras):
    """1.1 times the largest camera distance from the camera centroid (at least 1e-6)."""
    centers = np.array([c.center for c in cameras])
    return max(1.1 * float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()), 1e-6)


def _downscale(image, factor):
    if factor == 1.0:
        return np.asarray(image, float)
    img = np.asarray(image, float)
    h, w = img.shape[:2]
    size = (max(1, int(round(w / factor))), max(1, int(round(h / factor))))
    chans = [np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F")
                        .resize(size, Image.Resampling.BOX), float) for c in range(3)]
    return np.stack(chans, axis=-1)


def make_views(images, cameras, masks=None, downscale=1.0):
    """``(camera, target, mask)`` triples, optionally downscaled by ``downscale`` >= 1."""
    if len(images) != len(cameras):
        raise ValueError(f"{len(images)} images for {len(cameras)} cameras")
    if downscale < 1.0:
        raise ValueError("downscale factor must be >= 1")
    views = []
    for k, (img, cam) in enumerate(zip(images, cameras)):
        img = np.asarray(img, float)
        if img.shape != (cam.height, cam.width, 3):
            raise ValueError(f"image {k} has shape {img.shape}, camera expects "
                             f"{(cam.height, cam.width, 3)}")
        mask = None if masks is None else masks[k]
        if downscale != 1.0:
            img = _downscale(img, downscale)
            cam = cam.scaled(img.shape[1] / cam.width)
            if mask is not None:
                mask = _downscale(np.repeat(np.asarray(mask, float)[..., None], 3, -1),
                                  downscale)[..., 0]
        views.append((cam, img, mask))
    return views


def _check_loss(value, mesh, stage, frame):
    if not np.isfinite(value):
        raise OptimizationError(f"non-finite {stage} loss at frame {frame}", mesh.copy())


def _optimize(mesh, stage, config, loss_fn, scene, ceiling=None):
    schedule = config.schedule
    trainable = schedule.trainable(stage)
    opt = Adam(schedule.learning_rates(scene), trainable, schedule.beta1, schedule.beta2,
               schedule.eps)
    floor = schedule.scale_floor * scene
    params = mesh.attributes()
    curve = []
    total = schedule.iterations(stage)
    for it in range(total):
        opt.lrs["positions"] = schedule.position_lr(scene, it, total)
        value, grads = loss_fn(mesh)
        _check_loss(value, mesh, stage, mesh.frame_index)
        curve.append(value)
        opt.step(params, grads)
        _project(mesh, trainable, floor, ceiling)
    value, _ = loss_fn(mesh)
    curve.append(value)
    return curve


def _initial_scales(positions, adjacency):
    dist = min_ring_distance(positions, adjacency)
    bad = (dist <= 0) | ~np.isfinite(dist)
    if np.any(bad):
        v = int(np.flatnonzero(bad)[0])
        raise ValueError(f"degenerate mesh: vertex {v} has no positive one-ring distance")
    return np.repeat(0.5 * dist[:, None], 3, axis=1)


def frame_reference(positions, topology, lambda_w=None):
    """Frame-0 quantities (positions, dihedral angles, initial scales, edge weights)."""
    positions = np.asarray(positions, float)
    adjacency = build_adjacency(topology, positions, lambda_w)
    angles, valid = dihedral_angles(positions, adjacency, topology, return_valid=True)
    return FrameReference(positions, angles, valid, _initial_scales(positions, adjacency),
                          adjacency)


def initial_gaussians(positions, topology, texture=None):
    """Unoptimized frame-0 Gaussians: +z along the vertex normal, isotropic half-ring scale.

    Colours are sampled from ``texture`` at the vertex UVs, or mid-grey.
    """
    positions = np.asarray(positions, float)
    reference = frame_reference(positions, topology)
    normals = vertex_normals(positions, topology)
    if texture is not None:
        if topology.uv is None:
            raise ValueError("mesh has no UV coordinates")
        colors = np.clip(sample_texture(texture, topology.uv), 0.0, 1.0)
    else:
        colors = np.full((topology.n_v, 3), 0.5)
    return GaussianMesh(positions, rotation.shortest_arc(normals), reference.scales.copy(),
                        colors, np.ones(topology.n_v), topology, 0)


def init_first_frame(positions, topology, texture, views, config, scene=None):
    """Gaussian Mesh at frame 0: vertices fixed, rotations and scales fitted.

    Returns ``(mesh, reference, curve)``. ``texture`` may be ``None``, in
    which case colours start at mid-grey.
    """
    mesh = initial_gaussians(positions, topology, texture)
    reference = frame_reference(positions, topology, config.loss.lambda_w)
    s_init = reference.scales
    scene = scene if scene is not None else scene_scale([v[0] for v in views])
    loss = config.loss
    settings = config.render

    def loss_fn(m):
        value, grads = multiview_image_loss(m, views, loss.image, loss.ssim_window, settings)
        v_s, g_s = scale_loss(m.scales, s_init, loss.init_scale_cap)
        grads["scales"] = grads["scales"] + loss.scale * g_s
        return value + loss.scale * v_s, grads

    ceiling = loss.init_scale_cap * s_init if config.schedule.hard_scale_cap else None
    curve = _optimize(mesh, "init", config, loss_fn, scene, ceiling)
    return mesh, reference, curve


def start_sequence(positions, topology, texture, views, config, scene=None):
    mesh, reference, curve = init_first_frame(positions, topology, texture, views, config, scene)
    return SequenceState(0, mesh, reference, [{"frame": 0, "init": curve}])


def track_frame(state, views, config, scene=None):
    """Advance ``state`` by one frame; returns the new base mesh."""
    scene = scene if scene is not None else scene_scale([v[0] for v in views])
    prev = state.mesh
    prev_pos, prev_rot = prev.positions.copy(), prev.rotations.copy()
    mesh = prev.copy(frame_index=prev.frame_index + 1)

    def loss_fn(m):
        b = geo_loss(m, (prev_pos, prev_rot), state.reference, config.loss, views, config.render)
        return b.total, b.grads

    curve = _optimize(mesh, "geometry", config, loss_fn, scene)
    state.frame_index = mesh.frame_index
    state.mesh = mesh
    state.history.append({"frame": mesh.frame_index, "geometry": curve})
    return mesh


def optimize_texture_frame(state, dense, views, config, scene=None):
    """Fit dense colours to the frame's images with geometry held fixed.

    ``dense`` is re-anchored to ``state.mesh`` first; its colours are the
    warm start.
    """
    scene = scene if scene is not None else scene_scale([v[0] for v in views])
    dense = refresh_dense_positions(dense, state.mesh)
    loss = config.loss
    projections = None
    if not set(config.schedule.trainable("texture")) & {"positions", "rotations", "scales"}:
        projections = [project(dense, cam, config.render) for cam, _, _ in views]

    def loss_fn(m):
        return multiview_image_loss(m, views, loss.image, loss.ssim_window, config.render,
                                    projections)

    curve = _optimize(dense, "texture", config, loss_fn, scene)
    state.dense = dense
    if state.history and state.history[-1].get("frame") == state.frame_index:
        state.history[-1]["texture"] = curve
    else:
        state.history.append({"frame": state.frame_index, "texture": curve})
    return dense


def reference_checksum(reference):
    """Digest of the frame-0 quantities, for immutability checks."""
    h = hashlib.sha256()
    for arr in (reference.positions, reference.angles, reference.angles_valid,
                reference.scales, reference.adjacency.w_ij):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()

