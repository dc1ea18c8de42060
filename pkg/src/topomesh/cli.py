"""Command-line interface.

Exit codes: 0 success, 1 invalid input (bad flags, config, files), 2 runtime failure.
"""

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats
from .config import ConfigError, RunConfig
from .dense import bake_texture, densify_uv, normal_expansion
from .formats import FormatError
from .gradcheck import run_gradcheck
from .mesh import TopologyError, vertex_normals
from .pipeline import (
    OptimizationError,
    SequenceState,
    frame_reference,
    init_first_frame,
    make_views,
    optimize_texture_frame,
    scene_scale,
    track_frame,
)
from .render import render
from .synth import PRESETS, make_sequence, tracking_error

__all__ = ["run_cli", "main"]

log = logging.getLogger("topomesh")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- run directory layout --------------------------------------------------------

def _out(config):
    path = Path(config.output)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _checkpoint_path(config, frame, dense=False):
    return _out(config) / ("dense" if dense else "checkpoints") / f"frame_{frame:04d}.tmgc"


def _record(config, stage, outputs, **extra):
    """Merge a stage entry into the run manifest."""
    path = _out(config) / "manifest.json"
    manifest = formats.read_json(path) if path.exists() else {"stages": {}}
    manifest["config"] = config.to_dict()
    manifest["stages"][stage] = {"outputs": sorted(str(p) for p in outputs), **extra}
    formats.write_json(path, manifest)


def _cameras(config):
    config.check_paths("cameras")
    return formats.load_cameras(config.cameras)


def _frame_count(config):
    config.check_paths("sequence")
    n = formats.count_frames(config.sequence)
    if n == 0:
        raise FileNotFoundError(f"missing frame directory: "
                                f"{Path(config.sequence) / 'frame_0000'}")
    return n


def _check_images(config, frames, n_cameras):
    for t in frames:
        for k in range(n_cameras):
            p = formats.frame_image_path(config.sequence, t, k)
            if not p.is_file():
                raise FileNotFoundError(f"missing frame image: {p}")


def _views(config, cameras, frame, downscale):
    images = formats.load_frame_images(config.sequence, frame, len(cameras))
    return make_views(images, cameras, downscale=downscale)


def _scene(config, cameras):
    return config.scene_scale if config.scene_scale is not None else scene_scale(cameras)


def _load_base(config, frame):
    path = _checkpoint_path(config, frame)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    return formats.load_checkpoint(path)


def _frames_with(config, dense=False):
    frames = []
    while _checkpoint_path(config, len(frames), dense).is_file():
        frames.append(len(frames))
    if not frames:
        stage = "texture" if dense else "init"
        raise FileNotFoundError(f"no checkpoints in {_checkpoint_path(config, 0, dense).parent}; "
                                f"run '{stage}' first")
    return frames


# --- subcommands -----------------------------------------------------------------

def cmd_synth(args, config):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seq = make_sequence(args.subdivision, args.preset, args.frames, args.magnitude,
                        args.n_cameras, args.image_size, args.texture_kind,
                        args.texture_resolution, seed=config.seed)
    written = [out / "cameras.json", out / "texture.png"]
    formats.save_cameras(written[0], seq.cameras)
    formats.save_png(written[1], seq.texture)
    for t, (positions, images) in enumerate(zip(seq.frames, seq.images)):
        mesh_path = out / f"gt_mesh_{t:04d}.obj"
        formats.save_obj(mesh_path, positions, seq.topology)
        written.append(mesh_path)
        (out / f"frame_{t:04d}").mkdir(exist_ok=True)
        for k, img in enumerate(images):
            p = formats.frame_image_path(out, t, k)
            formats.save_png(p, img)
            written.append(p)
    run = RunConfig(**{k: v for k, v in config.__dict__.items()
                       if k not in ("cameras", "sequence", "mesh", "texture", "output")},
                    cameras="cameras.json", sequence=".", mesh="gt_mesh_0000.obj",
                    texture="texture.png", output="run")
    run.save(out / "config.json")
    written.append(out / "config.json")
    formats.write_json(out / "manifest.json", {
        "preset": args.preset, "frames": args.frames, "subdivision": args.subdivision,
        "cameras": args.n_cameras, "image_size": args.image_size, "seed": config.seed,
        "outputs": sorted(str(p) for p in written)})
    print(f"wrote {len(seq.frames)} frames x {len(seq.cameras)} cameras to {out}")


def cmd_init(args, config):
    config.check_paths("cameras", "sequence", "mesh", "texture")
    cameras = _cameras(config)
    _check_images(config, [0], len(cameras))
    topology, positions = formats.load_obj(config.mesh)
    texture = formats.load_png(config.texture)
    views = _views(config, cameras, 0, config.geometry_downscale)
    start = time.perf_counter()
    mesh, _, curve = init_first_frame(positions, topology, texture, views, config,
                                      _scene(config, cameras))
    path = _checkpoint_path(config, 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    formats.save_checkpoint(path, mesh)
    _record(config, "init", [path], loss_curve=curve, seconds=time.perf_counter() - start)
    print(f"init: loss {curve[0]:.6g} -> {curve[-1]:.6g}; wrote {path}")


def cmd_track(args, config):
    cameras = _cameras(config)
    n_frames = _frame_count(config)
    last = n_frames - 1 if args.last is None else min(args.last, n_frames - 1)
    _check_images(config, range(1, last + 1), len(cameras))
    base0 = _load_base(config, 0)
    reference = frame_reference(base0.positions, base0.topology, config.loss.lambda_w)
    state = SequenceState(0, base0, reference)
    scene = _scene(config, cameras)
    outputs, curves, timing = [], {}, {}
    for t in range(1, last + 1):
        path = _checkpoint_path(config, t)
        if args.resume and path.is_file():
            state.mesh = formats.load_checkpoint(path)
            state.frame_index = t
            outputs.append(path)
            continue
        start = time.perf_counter()
        views = _views(config, cameras, t, config.geometry_downscale)
        mesh = track_frame(state, views, config, scene)
        formats.save_checkpoint(path, mesh)
        outputs.append(path)
        curves[t] = state.history[-1]["geometry"]
        timing[t] = time.perf_counter() - start
        print(f"track frame {t}: loss {curves[t][0]:.6g} -> {curves[t][-1]:.6g} "
              f"({timing[t]:.1f}s)")
    _record(config, "track", outputs, loss_curves=curves, seconds=timing)


def cmd_texture(args, config):
    cameras = _cameras(config)
    frames = _frames_with(config)
    _check_images(config, frames, len(cameras))
    scene = _scene(config, cameras)
    base0 = _load_base(config, 0)
    dense = densify_uv(base0, config.densify_n)
    state = SequenceState(0, base0, None)
    outputs, curves = [], {}
    for t in frames:
        state.mesh = _load_base(config, t)
        state.frame_index = t
        views = _views(config, cameras, t, 1.0)
        dense = optimize_texture_frame(state, dense, views, config, scene)
        path = _checkpoint_path(config, t, dense=True)
        path.parent.mkdir(parents=True, exist_ok=True)
        formats.save_checkpoint(path, dense.as_gaussian_mesh())
        outputs.append(path)
        curves[t] = state.history[-1]["texture"]
        print(f"texture frame {t}: loss {curves[t][0]:.6g} -> {curves[t][-1]:.6g}")
    _record(config, "texture", outputs, loss_curves=curves, dense_gaussians=dense.n_v)


def cmd_extract_mesh(args, config):
    outputs = []
    normals = None
    for t in _frames_with(config):
        base = _load_base(config, t)
        normals = vertex_normals(base, previous=normals)
        expanded = normal_expansion(base, normals)
        path = _out(config) / "meshes" / f"frame_{t:04d}.obj"
        path.parent.mkdir(parents=True, exist_ok=True)
        formats.save_obj(path, expanded, base.topology)
        outputs.append(path)
    _record(config, "extract-mesh", outputs)
    print(f"extract-mesh: wrote {len(outputs)} meshes")


def cmd_bake_texture(args, config):
    outputs, diagnostics = [], {}
    for t in _frames_with(config, dense=True):
        dense = formats.load_checkpoint(_checkpoint_path(config, t, dense=True))
        tex = bake_texture(dense, config.texture_resolution)
        folder = _out(config) / "textures"
        folder.mkdir(parents=True, exist_ok=True)
        rgb_path = folder / f"frame_{t:04d}.png"
        mask_path = folder / f"frame_{t:04d}_mask.png"
        formats.save_png(rgb_path, tex.rgb)
        formats.save_mask_png(mask_path, tex.mask)
        outputs += [rgb_path, mask_path]
        diagnostics[t] = tex.diagnostics
    _record(config, "bake-texture", outputs, diagnostics=diagnostics)
    print(f"bake-texture: wrote {len(diagnostics)} textures")


def cmd_render(args, config):
    cameras = _cameras(config)
    path = _checkpoint_path(config, args.frame, dense=args.dense)
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint: {path}")
    mesh = formats.load_checkpoint(path)
    indices = range(len(cameras)) if args.camera is None else [args.camera]
    outputs = []
    for k in indices:
        if not 0 <= k < len(cameras):
            raise ValueError(f"camera index {k} out of range (rig has {len(cameras)})")
        out = _out(config) / "renders" / f"frame_{args.frame:04d}_cam_{k:02d}.png"
        out.parent.mkdir(parents=True, exist_ok=True)
        formats.save_png(out, render(mesh, cameras[k], config.render).rgb)
        outputs.append(out)
    _record(config, "render", outputs)
    print(f"render: wrote {len(outputs)} images")


def cmd_gradcheck(args, config):
    rows = run_gradcheck(config.loss, seed=config.seed, tolerance=args.tolerance)
    width = max(len(r.name) for r in rows)
    print(f"{'check':<{width}}  {'rel. error':>11}  result")
    for r in rows:
        print(f"{r.name:<{width}}  {r.error:11.3e}  {'PASS' if r.passed else 'FAIL'}")
    if not all(r.passed for r in rows):
        raise OptimizationError("gradient check failed")


def cmd_report(args, config):
    frames = _frames_with(config)
    gt_dir = Path(args.ground_truth or config.sequence or ".")
    tracked, truth = [], []
    topology = None
    for t in frames:
        base = _load_base(config, t)
        gt_path = gt_dir / f"gt_mesh_{t:04d}.obj"
        if not gt_path.is_file():
            raise FileNotFoundError(f"missing ground-truth mesh: {gt_path}")
        _, gt = formats.load_obj(gt_path)
        tracked.append(base.positions)
        truth.append(gt)
        topology = base.topology
    textures = None
    tex_paths = [_out(config) / "textures" / f"frame_{t:04d}.png" for t in frames]
    if all(p.is_file() for p in tex_paths):
        textures = [formats.load_png(p) for p in tex_paths]
    report = tracking_error(tracked, truth, topology, textures)
    data = report.to_dict()
    json_path = _out(config) / "report.json"
    csv_path = _out(config) / "report.csv"
    formats.write_json(json_path, _finite(data))
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(data["frames"][0]))
        writer.writeheader()
        writer.writerows(data["frames"])
    _record(config, "report", [json_path, csv_path])
    worst = max(report.mean_error)
    print(f"report: worst per-frame mean error {worst:.4f} edge lengths; wrote {json_path}")


def _finite(obj):
    """JSON-safe copy: infinities become strings."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


# --- parser ----------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="topomesh", description="Topology-consistent Gaussian mesh tracking.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, config_required=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=config_required, help="RunConfig JSON")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write a synthetic sequence with ground truth",
            config_required=False)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=PRESETS, default="bump")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--magnitude", type=float, default=None,
                   help="deformation size (preset units; default per preset)")
    p.add_argument("--subdivision", type=int, default=3)
    p.add_argument("--n-cameras", type=int, default=6)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--texture-kind", choices=("checker", "flat"), default="checker")
    p.add_argument("--texture-resolution", type=int, default=256)

    add("init", cmd_init, "fit frame-0 Gaussian rotations and scales")
    p = add("track", cmd_track, "track the mesh through the sequence")
    p.add_argument("--last", type=int, default=None, help="last frame to track")
    p.add_argument("--resume", action="store_true", help="reuse existing frame checkpoints")
    add("texture", cmd_texture, "fit dense colours per frame")
    add("extract-mesh", cmd_extract_mesh, "write normal-expanded OBJ meshes per frame")
    add("bake-texture", cmd_bake_texture, "bake dense colours into UV textures per frame")
    p = add("render", cmd_render, "render a checkpoint from the camera rig")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--camera", type=int, default=None, help="camera index (default: all)")
    p.add_argument("--dense", action="store_true", help="render the dense texture mesh")
    p = add("gradcheck", cmd_gradcheck, "compare analytic gradients with finite differences",
            config_required=False)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p = add("report", cmd_report, "tracking error against ground-truth meshes")
    p.add_argument("--ground-truth", default=None,
                   help="directory with gt_mesh_####.obj (default: the sequence directory)")
    return parser


def _threads():
    raw = os.environ.get("TOPOMESH_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TOPOMESH_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("TOPOMESH_THREADS must be >= 0")
    return n or None


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = RunConfig.load(args.config) if args.config else RunConfig()
        threads = _threads()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(limits=threads):
            args.func(args, config)
    except (ConfigError, FormatError, TopologyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OptimizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run_cli())

