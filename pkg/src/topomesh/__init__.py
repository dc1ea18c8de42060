"""Topology-consistent Gaussian mesh tracking from multi-view video.

One anisotropic Gaussian sits on every vertex of a fixed quad mesh. The
Gaussians are fitted to multi-view images frame by frame under rigidity,
isometry and smoothness priors, then densified in UV space to recover a
per-frame texture.
"""

from .config import RunConfig
from .dense import (
    DenseGaussianMesh,
    TextureMap,
    bake_texture,
    bilinear_sample,
    densify_uv,
    normal_expansion,
    refresh_dense_positions,
)
from .estimator import GaussianMeshTracker
from .losses import LossConfig, geo_loss
from .mesh import GaussianMesh, Topology, TopologyError, build_adjacency, vertex_normals
from .pipeline import (
    StageSchedule,
    adam_step,
    init_first_frame,
    optimize_texture_frame,
    track_frame,
)
from .render import Camera, RenderSettings, render, render_backward

__all__ = [
    "Camera",
    "DenseGaussianMesh",
    "GaussianMesh",
    "GaussianMeshTracker",
    "LossConfig",
    "RenderSettings",
    "RunConfig",
    "StageSchedule",
    "TextureMap",
    "Topology",
    "TopologyError",
    "adam_step",
    "bake_texture",
    "bilinear_sample",
    "build_adjacency",
    "densify_uv",
    "geo_loss",
    "init_first_frame",
    "normal_expansion",
    "optimize_texture_frame",
    "refresh_dense_positions",
    "render",
    "render_backward",
    "track_frame",
    "vertex_normals",
]

__version__ = "0.1.0"
