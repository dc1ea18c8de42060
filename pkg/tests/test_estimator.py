import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from topomesh import GaussianMeshTracker
from topomesh.synth import make_sequence


@pytest.fixture(scope="module")
def tiny():
    seq = make_sequence(subdivision=2, preset="rigid", frames=2, n_cameras=3, image_size=24,
                        texture_resolution=32)
    est = GaussianMeshTracker(init_iterations=5, geometry_iterations=5, texture_iterations=3,
                              densify_n=3, texture_resolution=16)
    est.fit(seq.images, cameras=seq.cameras, mesh=(seq.topology, seq.frames[0]),
            texture=seq.texture)
    return seq, est


def test_params_and_clone():
    est = GaussianMeshTracker(lambda_iso=5.0, densify_n=4)
    params = est.get_params()
    assert params["lambda_iso"] == 5.0 and params["lambda_rot"] == 20.0
    assert params["lambda_pos"] == 1e3 and params["scale_cap"] == 1.5
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(lambda_flat=1.0)
    assert est.lambda_flat == 1.0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        GaussianMeshTracker().transform(None)
    with pytest.raises(NotFittedError):
        GaussianMeshTracker().bake_textures()


def test_tiny_fit(tiny):
    seq, est = tiny
    assert est.n_frames_ == 2 and len(est.meshes_) == 2 and len(est.dense_meshes_) == 2
    out = est.transform(None)
    assert out.shape == (2, seq.topology.n_v, 3) and np.all(np.isfinite(out))
    assert est.transform(seq.images).shape == out.shape
    with pytest.raises(ValueError, match="fitted on 2 frames"):
        est.transform(seq.images[:1])
    imgs = est.predict(seq.cameras[:2])
    assert imgs.shape == (2, 24, 24, 3)
    assert est.predict(seq.cameras[:1], dense=True).shape == (1, 24, 24, 3)
    textures = est.bake_textures()
    assert len(textures) == 2 and textures[0].resolution == 16


def test_fit_rejects_bad_input(tiny):
    seq, _ = tiny
    est = GaussianMeshTracker(init_iterations=1, geometry_iterations=1, fit_texture=False)
    with pytest.raises(ValueError):
        est.fit([seq.images[0][:2]], cameras=seq.cameras, mesh=(seq.topology, seq.frames[0]))
