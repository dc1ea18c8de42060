"""Analytic-versus-finite-difference checks for every objective and the renderer."""

from dataclasses import dataclass

import numpy as np

from . import losses, rotation
from .losses import LossConfig
from .mesh import GaussianMesh, build_adjacency, dihedral_angles
from .render import Camera, RenderSettings, render, render_backward
from .synth import finite_diff_gradient, make_grid

__all__ = ["GradCheck", "run_gradcheck", "relative_error", "random_patch", "random_scene"]


@dataclass
class GradCheck:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.error < self.tolerance)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, float)
    numeric = np.asarray(numeric, float)
    scale = max(float(np.abs(numeric).max(initial=0.0)), float(np.abs(analytic).max(initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def random_patch(rng, jitter=0.1):
    """Perturbed 3x3 quad patch: ``(topology, frame0, previous, current)`` dicts of positions/rotations."""
    topo, p0 = make_grid(3, 3)
    p0 = p0 + rng.normal(0.0, jitter, p0.shape)
    n = topo.n_v

    def state():
        return (p0 + rng.normal(0.0, jitter, p0.shape),
                rotation.normalize(rng.normal(size=(n, 4))))

    return topo, p0, state(), state()


def random_scene(rng, n=None, size=8):
    """At most 10 Gaussians in front of a camera looking down +z."""
    n = int(rng.integers(1, 11)) if n is None else n
    cam = Camera.look_at([0.0, 0.0, -4.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], 1.2 * size,
                         size, size)
    attrs = {
        "positions": rng.uniform(-0.8, 0.8, (n, 3)),
        "rotations": rotation.normalize(rng.normal(size=(n, 4))),
        "scales": rng.uniform(0.15, 0.6, (n, 3)),
        "colors": rng.uniform(0.0, 1.0, (n, 3)),
        "opacities": rng.uniform(0.3, 0.95, n),
    }
    return attrs, cam


def _fd(func, x, h):
    return finite_diff_gradient(func, x, h)


def run_gradcheck(config=None, seed=0, tolerance=1e-3, h=1e-6):
    """One :class:`GradCheck` per objective, plus one per renderer attribute."""
    config = config or LossConfig()
    rng = np.random.default_rng(seed)
    out = []

    # image term with a soft mask
    x = rng.uniform(size=(16, 16, 3))
    y = rng.uniform(size=(16, 16, 3))
    mask = rng.uniform(0.2, 1.0, size=(16, 16))
    weight = config.image if config.image > 0 else 0.2
    _, g = losses.image_loss(x, y, mask, weight, config.ssim_window)
    fd = _fd(lambda z: losses.image_loss(z, y, mask, weight, config.ssim_window)[0], x, h)
    out.append(GradCheck("image", relative_error(g, fd), tolerance))

    # scale term, with some components above the cap
    s_init = rng.uniform(0.5, 1.0, (9, 3))
    s = s_init * rng.uniform(0.2, 2.0, (9, 3))
    _, g = losses.scale_loss(s, s_init, config.init_scale_cap)
    fd = _fd(lambda z: losses.scale_loss(z, s_init, config.init_scale_cap)[0], s, h)
    out.append(GradCheck("scale", relative_error(g, fd), tolerance))

    topo, p0, (pp, pq), (p, q) = random_patch(rng)
    adj = build_adjacency(topo, p0, config.lambda_w)

    _, gp, gq = losses.rigid_loss(pp, pq, p, q, adj)
    fdp = _fd(lambda z: losses.rigid_loss(pp, pq, z, q, adj)[0], p, h)
    fdq = _fd(lambda z: losses.rigid_loss(pp, pq, p, z, adj)[0], q, h)
    out.append(GradCheck("rigid", max(relative_error(gp, fdp), relative_error(gq, fdq)),
                         tolerance))

    _, gq = losses.rot_loss(pq, q, adj)
    fd = _fd(lambda z: losses.rot_loss(pq, z, adj)[0], q, h)
    out.append(GradCheck("rot", relative_error(gq, fd), tolerance))

    _, gp = losses.iso_loss(p0, p, adj)
    fd = _fd(lambda z: losses.iso_loss(p0, z, adj)[0], p, h)
    out.append(GradCheck("iso", relative_error(gp, fd), tolerance))

    _, gp, _ = losses.pos_loss(p, adj)
    fd = _fd(lambda z: losses.pos_loss(z, adj)[0], p, h)
    out.append(GradCheck("pos", relative_error(gp, fd), tolerance))

    angles, valid = dihedral_angles(p0, adj, topo, return_valid=True)
    ref = losses.FrameReference(p0, angles, valid, np.ones((topo.n_v, 3)), adj)
    _, gp, _ = losses.flat_loss_positions(p, ref, topo)
    fd = _fd(lambda z: losses.flat_loss_positions(z, ref, topo)[0], p, h)
    out.append(GradCheck("flat", relative_error(gp, fd), tolerance))

    # the weighted aggregate, without views
    mesh = GaussianMesh(p, q, np.ones((topo.n_v, 3)), np.full((topo.n_v, 3), 0.5),
                        np.ones(topo.n_v), topo)

    def geo_at(pos=None, rot=None):
        m = mesh.copy()
        if pos is not None:
            m.positions = pos
        if rot is not None:
            m.rotations = rot  # bypass re-normalization so d/dq is taken as-is
        return losses.geo_loss(m, (pp, pq), ref, config)

    b = geo_at()
    fdp = _fd(lambda z: geo_at(pos=z).total, p, h)
    fdq = _fd(lambda z: geo_at(rot=z).total, mesh.rotations, h)
    out.append(GradCheck("geo", max(relative_error(b.grads["positions"], fdp),
                                    relative_error(b.grads["rotations"], fdq)), tolerance))

    # renderer, oracle mode so every pair contributes smoothly
    settings = RenderSettings.oracle(background=(0.1, 0.2, 0.3))
    attrs, cam = random_scene(rng)
    upstream = rng.normal(size=(cam.height, cam.width, 3))
    grads, _ = render_backward(attrs, cam, upstream, settings)
    for name in ("positions", "rotations", "scales", "colors", "opacities"):
        def f(z, name=name):
            a = dict(attrs)
            a[name] = z
            return float(np.sum(upstream * render(a, cam, settings).rgb))

        fd = _fd(f, attrs[name], h)
        out.append(GradCheck(f"render:{name}",
                             relative_error(getattr(grads, name), fd), tolerance))
    return out
