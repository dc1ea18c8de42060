"""scikit-learn style front end for the whole pipeline."""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .dense import bake_texture, densify_uv, normal_expansion
from .losses import LossConfig
from .mesh import vertex_normals
from .pipeline import (
    StageSchedule,
    make_views,
    optimize_texture_frame,
    scene_scale,
    start_sequence,
    track_frame,
)
from .render import RenderSettings, render
from .validation import check_cameras, check_mesh, check_sequence, check_texture

__all__ = ["GaussianMeshTracker"]


class GaussianMeshTracker(BaseEstimator, TransformerMixin):
    """Track a registered quad mesh through a multi-view image sequence.

    ``fit`` takes the images as ``X[frame][camera]`` together with the
    camera rig and the frame-0 mesh. The tracker is transductive:
    ``transform`` returns the extracted (normal-expanded) vertices for the
    sequence seen in ``fit``, one ``(n_v, 3)`` array per frame.

    Fitted attributes: ``meshes_`` (one GaussianMesh per frame),
    ``dense_meshes_`` (when ``fit_texture``), ``reference_``, ``history_``,
    ``cameras_``, ``n_frames_``.
    """

    def __init__(self, init_iterations=200, geometry_iterations=300, texture_iterations=150,
                 lambda_image=0.2, lambda_scale=10.0, lambda_rigid=0.0, lambda_rot=20.0,
                 lambda_iso=20.0, lambda_pos=1e3, lambda_flat=2e-4, scale_cap=1.5,
                 lambda_w=None, release_colors=True, texture_rotations=False, densify_n=30,
                 texture_resolution=1024, geometry_downscale=1.0, fit_texture=True,
                 scene_scale=None):
        self.init_iterations = init_iterations
        self.geometry_iterations = geometry_iterations
        self.texture_iterations = texture_iterations
        self.lambda_image = lambda_image
        self.lambda_scale = lambda_scale
        self.lambda_rigid = lambda_rigid
        self.lambda_rot = lambda_rot
        self.lambda_iso = lambda_iso
        self.lambda_pos = lambda_pos
        self.lambda_flat = lambda_flat
        self.scale_cap = scale_cap
        self.lambda_w = lambda_w
        self.release_colors = release_colors
        self.texture_rotations = texture_rotations
        self.densify_n = densify_n
        self.texture_resolution = texture_resolution
        self.geometry_downscale = geometry_downscale
        self.fit_texture = fit_texture
        self.scene_scale = scene_scale

    def _config(self):
        loss = LossConfig(image=self.lambda_image, scale=self.lambda_scale,
                          rigid=self.lambda_rigid, rot=self.lambda_rot, iso=self.lambda_iso,
                          pos=self.lambda_pos, flat=self.lambda_flat,
                          init_scale_cap=self.scale_cap, lambda_w=self.lambda_w)
        schedule = StageSchedule(init_iterations=self.init_iterations,
                                 geometry_iterations=self.geometry_iterations,
                                 texture_iterations=self.texture_iterations,
                                 release_colors=self.release_colors,
                                 texture_rotations=self.texture_rotations)
        return RunConfig(loss=loss, schedule=schedule, densify_n=self.densify_n,
                         texture_resolution=self.texture_resolution,
                         geometry_downscale=self.geometry_downscale,
                         scene_scale=self.scene_scale)

    def fit(self, X, y=None, *, cameras, mesh, texture=None, masks=None):
        """Run init, per-frame tracking and (optionally) per-frame texture fitting.

        ``mesh`` is ``(Topology, frame-0 positions)``; ``texture`` the
        registration texture sampled for the initial colours; ``masks``
        optional per-frame, per-camera ``(h, w)`` weights.
        """
        config = self._config()
        cameras = check_cameras(cameras)
        frames = check_sequence(X, cameras)
        topology, positions = check_mesh(mesh)
        texture = check_texture(texture)
        scene = self.scene_scale or scene_scale(cameras)

        def views(t, downscale):
            return make_views(frames[t], cameras, None if masks is None else masks[t], downscale)

        state = start_sequence(positions, topology, texture,
                               views(0, config.geometry_downscale), config, scene)
        meshes = [state.mesh.copy()]
        for t in range(1, len(frames)):
            meshes.append(track_frame(state, views(t, config.geometry_downscale), config,
                                      scene).copy())
        self.dense_meshes_ = []
        if self.fit_texture:
            dense = densify_uv(meshes[0], config.densify_n)
            for t, base in enumerate(meshes):
                state.mesh, state.frame_index = base, t
                dense = optimize_texture_frame(state, dense, views(t, 1.0), config, scene)
                self.dense_meshes_.append(dense)
        self.meshes_ = meshes
        self.reference_ = state.reference
        self.history_ = state.history
        self.cameras_ = cameras
        self.n_frames_ = len(frames)
        return self

    def transform(self, X=None):
        """Normal-expanded vertex positions, shape ``(frames, n_v, 3)``."""
        check_is_fitted(self, "meshes_")
        if X is not None and len(X) != self.n_frames_:
            raise ValueError(f"tracker was fitted on {self.n_frames_} frames, got {len(X)}")
        out = []
        normals = None
        for m in self.meshes_:
            normals = vertex_normals(m, previous=normals)
            out.append(normal_expansion(m, normals))
        return np.stack(out)

    def predict(self, X, frame=-1, dense=False):
        """Render ``frame`` from each camera in ``X``; returns ``(cameras, h, w, 3)``."""
        check_is_fitted(self, "meshes_")
        cameras = check_cameras(X)
        source = self.dense_meshes_ if dense else self.meshes_
        if dense and not source:
            raise ValueError("no dense meshes: fit with fit_texture=True")
        gaussians = source[frame]
        return np.stack([render(gaussians, c, RenderSettings()).rgb for c in cameras])

    def bake_textures(self, resolution=None):
        """One TextureMap per frame from the fitted dense meshes."""
        check_is_fitted(self, "dense_meshes_")
        if not self.dense_meshes_:
            raise ValueError("no dense meshes: fit with fit_texture=True")
        r = resolution or self.texture_resolution
        return [bake_texture(d, r) for d in self.dense_meshes_]
