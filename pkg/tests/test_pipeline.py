from dataclasses import replace

import numpy as np
import pytest

from topomesh.config import RunConfig
from topomesh.dense import densify_uv, refresh_dense_positions
from topomesh.losses import LossConfig, multiview_image_loss
from topomesh.pipeline import (
    Adam,
    OptimizationError,
    SequenceState,
    StageSchedule,
    adam_step,
    frame_reference,
    init_first_frame,
    initial_gaussians,
    make_views,
    optimize_texture_frame,
    reference_checksum,
    scene_scale,
    start_sequence,
    track_frame,
)
from topomesh.render import Camera, render
from topomesh.synth import make_grid, make_sequence, procedural_texture, tracking_error


def _schedule(**kw):
    return RunConfig(schedule=replace(StageSchedule(), **kw))


# --- Adam -----------------------------------------------------------------------

def test_adam_zero_gradient():
    p = np.array([1.0, -2.0])
    m, v = np.array([0.5, 0.1]), np.array([0.2, 0.3])
    new, m2, v2 = adam_step(p, np.zeros(2), m, v, 3, 0.1)
    # bias-corrected m_hat is nonzero here, so only a fresh state keeps p fixed
    assert np.allclose(m2, 0.9 * m) and np.allclose(v2, 0.999 * v)
    fresh, _, _ = adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1)
    assert np.array_equal(fresh, p)


def test_adam_constant_gradient_step_is_lr():
    p, m, v = np.zeros(1), np.zeros(1), np.zeros(1)
    for t in range(1, 201):
        new, m, v = adam_step(p, np.array([3.7]), m, v, t, 0.01)
        step = p - new
        p = new
    assert step[0] == pytest.approx(0.01, rel=1e-3)


def test_adam_quadratic_bowl():
    x, m, v = np.array([1.0]), np.zeros(1), np.zeros(1)
    for t in range(1, 501):
        x, m, v = adam_step(x, 2 * x, m, v, t, 0.1)
    assert abs(x[0]) < 1e-4


def test_adam_non_finite_gradient_names_attribute():
    params = {"positions": np.zeros(3), "colors": np.zeros(3)}
    opt = Adam({"positions": 0.1, "colors": 0.1}, ("positions", "colors"))
    with pytest.raises(OptimizationError, match="colors"):
        opt.step(params, {"positions": np.ones(3), "colors": np.array([0.0, np.nan, 0.0])})


def test_adam_skips_frozen():
    params = {"positions": np.ones(3), "colors": np.ones(3)}
    opt = Adam({"positions": 0.1, "colors": 0.1}, ("positions",))
    opt.step(params, {"positions": np.ones(3), "colors": np.full(3, np.nan)})
    assert np.array_equal(params["colors"], np.ones(3))
    assert "colors" not in opt.moments


# --- schedule -------------------------------------------------------------------

def test_schedule_invariants():
    s = StageSchedule()
    for stage in ("init", "geometry", "texture"):
        assert "opacities" not in s.trainable(stage)
    assert "scales" not in s.trainable("geometry")
    assert s.trainable("texture") == ("colors",)
    assert s.trainable("init") == ("rotations", "scales")
    assert "colors" not in StageSchedule(release_colors=False).trainable("geometry")
    assert StageSchedule(texture_rotations=True).trainable("texture") == ("colors", "rotations")
    with pytest.raises(ValueError):
        s.trainable("bake")
    with pytest.raises(ValueError):
        StageSchedule(lr_colors=-1)
    assert StageSchedule.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError, match="unknown"):
        StageSchedule.from_dict({"iters": 3})


def test_position_lr_decay():
    s = StageSchedule()
    assert s.position_lr(2.0, 0, 100) == pytest.approx(2 * 1.6e-4)
    assert s.position_lr(2.0, 99, 100) == pytest.approx(2 * 1.6e-6)
    assert s.position_lr(2.0, 49.5, 100) == pytest.approx(2 * 1.6e-5)


# --- init ----------------------------------------------------------------------

def test_unit_grid_initial_scales():
    topo, pos = make_grid(3, 3)
    assert np.array_equal(initial_gaussians(pos, topo).scales, np.full((16, 3), 0.5))


def test_degenerate_mesh_rejected():
    topo, pos = make_grid(2, 2)
    pos[1] = pos[0]
    with pytest.raises(ValueError, match="degenerate"):
        frame_reference(pos, topo)


@pytest.fixture(scope="module")
def flat_scene():
    topo, pos = make_grid(4, 4, 0.25)
    pos = pos - pos.mean(axis=0)
    cam = Camera.look_at([0, 0, 3], [0, 0, 0], [0, -1, 0], 40, 32, 32)
    tex = procedural_texture(64)
    target = render(initial_gaussians(pos, topo, tex), cam).rgb
    return topo, pos, tex, make_views([target], [cam])


def test_init_fixed_point_without_scale_term(flat_scene):
    # rendered from the initial state itself: stationary, and Adam only jitters
    # around the L1 kink (its normalized steps do not shrink with the gradient)
    topo, pos, tex, views = flat_scene
    start = initial_gaussians(pos, topo, tex)
    value, grads = multiview_image_loss(start, views, 0.2)
    assert value < 1e-15
    assert max(np.abs(grads[k]).max() for k in ("rotations", "scales")) < 1e-12
    cfg = RunConfig(loss=replace(LossConfig(), scale=0.0),
                    schedule=replace(StageSchedule(), init_iterations=30))
    _, _, curve = init_first_frame(pos, topo, tex, views, cfg, scene=1.0)
    assert curve[-1] < 1e-3 and curve[-1] < 0.2 * max(curve)


def test_init_flattening_keeps_image_fit(flat_scene):
    # with the scale term the loss falls far below its start; the image term stays small
    topo, pos, tex, views = flat_scene
    cfg = _schedule(init_iterations=60)
    mesh, _, curve = init_first_frame(pos, topo, tex, views, cfg, scene=1.0)
    image = multiview_image_loss(mesh, views, cfg.loss.image)[0]
    assert curve[-1] < curve[0]
    assert image <= 0.01 * curve[0]


def test_init_flattens_sphere_four_cameras():
    seq = make_sequence(preset="rigid", frames=1, n_cameras=4)
    cfg = RunConfig()
    mesh, ref, _ = init_first_frame(seq.frames[0], seq.topology, seq.texture,
                                    make_views(seq.images[0], seq.cameras), cfg)
    ratio = mesh.scales / ref.scales
    assert np.all(ratio.min(axis=1) < 0.1)
    assert ratio.max() <= cfg.loss.init_scale_cap * (1 + 1e-12)
    assert np.allclose(np.linalg.norm(mesh.rotations, axis=1), 1.0, atol=1e-6)


# --- sequence on the harness ------------------------------------------------------

@pytest.fixture(scope="module")
def harness():
    seq = make_sequence(preset="rigid", frames=2)
    cfg = RunConfig()
    scene = scene_scale(seq.cameras)
    views = make_views(seq.images[0], seq.cameras)
    state = start_sequence(seq.frames[0], seq.topology, seq.texture, views, cfg, scene)
    edge = tracking_error([seq.frames[0]], [seq.frames[0]], seq.topology).mean_edge_length
    return seq, cfg, scene, state, edge


def _branch(state):
    return SequenceState(state.frame_index, state.mesh.copy(), state.reference, [])


@pytest.fixture(scope="module")
def rigid_step(harness):
    seq, cfg, scene, state, _ = harness
    before = reference_checksum(state.reference)
    branch = _branch(state)
    start = branch.mesh.copy()
    mesh = track_frame(branch, make_views(seq.images[1], seq.cameras), cfg, scene)
    report = tracking_error([seq.frames[0], mesh.positions], seq.frames, seq.topology)
    return start, mesh, report, before == reference_checksum(state.reference)


def test_track_frame_bookkeeping(rigid_step):
    start, mesh, _, ref_same = rigid_step
    assert ref_same
    assert mesh.frame_index == start.frame_index + 1
    assert np.array_equal(mesh.scales, start.scales)
    assert np.array_equal(mesh.opacities, start.opacities)
    assert np.allclose(np.linalg.norm(mesh.rotations, axis=1), 1.0, atol=1e-6)
    assert mesh.colors.min() >= 0 and mesh.colors.max() <= 1


def test_rigid_two_degrees_harness_bound(rigid_step):
    assert rigid_step[2].mean_error[1] < 0.05


@pytest.mark.xfail(reason="documented shortfall: about 3% on the harness with default weights",
                   strict=False)
def test_rigid_two_degrees_tight_bound(rigid_step):
    assert rigid_step[2].mean_error[1] < 0.02


def test_null_motion_self_rendered(harness):
    # targets rendered from the frame t-1 model itself, colours frozen
    seq, cfg, scene, state, edge = harness
    own = make_views([render(state.mesh, c, cfg.render).rgb for c in seq.cameras], seq.cameras)
    frozen = _schedule(release_colors=False)
    mesh = track_frame(_branch(state), own, frozen, scene)
    drift = np.linalg.norm(mesh.positions - state.mesh.positions, axis=1) / edge
    assert drift.mean() < 1e-3
    assert np.array_equal(mesh.colors, state.mesh.colors)


def test_non_finite_loss_aborts(harness):
    seq, cfg, scene, state, _ = harness
    bad = [(cam, np.full((cam.height, cam.width, 3), np.nan), None) for cam in seq.cameras]
    with pytest.raises(OptimizationError) as info:
        track_frame(_branch(state), bad, _schedule(geometry_iterations=2), scene)
    assert info.value.snapshot is not None


# --- texture stage ---------------------------------------------------------------

def test_texture_zero_iterations_keeps_colors(harness):
    seq, cfg, scene, state, _ = harness
    dense = densify_uv(state.mesh, 3)
    views = make_views(seq.images[0], seq.cameras)
    out = optimize_texture_frame(_branch(state), dense.copy(), views,
                                 _schedule(texture_iterations=0), scene)
    assert np.array_equal(out.colors, dense.colors)


def test_texture_fixed_point(harness):
    seq, cfg, scene, state, _ = harness
    dense = densify_uv(state.mesh, 4)
    target = make_views([render(dense, c, cfg.render).rgb for c in seq.cameras], seq.cameras)
    rng = np.random.default_rng(0)
    start = dense.copy()
    start.colors = np.clip(start.colors + rng.uniform(-0.02, 0.02, start.colors.shape), 0, 1)
    branch = _branch(state)
    base_before = branch.mesh.positions.copy()
    out = optimize_texture_frame(branch, start, target, _schedule(texture_iterations=50), scene)
    curve = branch.history[-1]["texture"]
    assert curve[-1] < 1e-4 < curve[0]
    assert branch.dense is out
    # texture stage leaves geometry and frozen dense attributes alone
    assert np.array_equal(branch.mesh.positions, base_before)
    anchored = refresh_dense_positions(start, branch.mesh)
    for name in ("positions", "rotations", "scales", "opacities"):
        assert np.array_equal(getattr(out, name), getattr(anchored, name))


def test_geometry_stage_ignores_dense(harness):
    seq, cfg, scene, state, _ = harness
    branch = _branch(state)
    branch.dense = densify_uv(state.mesh, 2)
    snapshot = branch.dense.copy()
    track_frame(branch, make_views(seq.images[1], seq.cameras),
                _schedule(geometry_iterations=3), scene)
    assert np.array_equal(branch.dense.positions, snapshot.positions)
    assert np.array_equal(branch.dense.colors, snapshot.colors)


def test_make_views_checks():
    cam = Camera.look_at([0, 0, 3], [0, 0, 0], [0, -1, 0], 40, 8, 8)
    with pytest.raises(ValueError, match="1 images for 2"):
        make_views([np.zeros((8, 8, 3))], [cam, cam])
    with pytest.raises(ValueError, match="shape"):
        make_views([np.zeros((4, 8, 3))], [cam])
    with pytest.raises(ValueError):
        make_views([np.zeros((8, 8, 3))], [cam], downscale=0.5)
    (small, img, _), = make_views([np.ones((8, 8, 3))], [cam], downscale=2.0)
    assert img.shape == (4, 4, 3) and small.width == 4 and np.allclose(img, 1.0)
