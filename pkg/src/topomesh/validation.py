"""Input checks shared by the estimator and the command line."""

import numpy as np

from .mesh import Topology
from .render import Camera

__all__ = ["check_cameras", "check_sequence", "check_mesh", "check_texture"]


def check_cameras(cameras):
    cameras = list(cameras)
    if not cameras:
        raise ValueError("at least one camera is required")
    for k, c in enumerate(cameras):
        if not isinstance(c, Camera):
            raise TypeError(f"camera {k} is {type(c).__name__}, expected Camera")
    return cameras


def check_sequence(X, cameras):
    """Images as ``frames x cameras`` float arrays in ``[0, 1]`` matching each camera."""
    if X is None:
        raise ValueError("image sequence is required")
    frames = [list(f) for f in X]
    if not frames:
        raise ValueError("image sequence has no frames")
    out = []
    for t, images in enumerate(frames):
        if len(images) != len(cameras):
            raise ValueError(f"frame {t} has {len(images)} images for {len(cameras)} cameras")
        row = []
        for k, (img, cam) in enumerate(zip(images, cameras)):
            arr = np.asarray(img, dtype=float)
            if arr.shape != (cam.height, cam.width, 3):
                raise ValueError(f"frame {t} camera {k}: image shape {arr.shape}, expected "
                                 f"{(cam.height, cam.width, 3)}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"frame {t} camera {k}: non-finite pixel values")
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"frame {t} camera {k}: pixel values must lie in [0, 1]")
            row.append(arr)
        out.append(row)
    return out


def check_mesh(mesh):
    """``(topology, positions)`` pair with finite positions of the right shape."""
    try:
        topology, positions = mesh
    except (TypeError, ValueError):
        raise TypeError("mesh must be a (Topology, positions) pair") from None
    if not isinstance(topology, Topology):
        raise TypeError(f"mesh topology is {type(topology).__name__}, expected Topology")
    positions = np.asarray(positions, dtype=float)
    if positions.shape != (topology.n_v, 3):
        raise ValueError(f"positions have shape {positions.shape}, expected ({topology.n_v}, 3)")
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")
    return topology, positions


def check_texture(texture):
    if texture is None:
        return None
    arr = np.asarray(texture, dtype=float)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"texture must have shape (h, w, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("texture values must be finite and lie in [0, 1]")
    return arr
