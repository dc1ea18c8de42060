"""On-disk formats: quad OBJ, camera rigs, PNG images, binary checkpoints, JSON manifests.

Checkpoint layout (all little-endian)::

    b"TMGC"                      magic
    u32 version                  currently 1
    u32 n_v, u32 n_f
    i32 frame_index
    u32 has_uv
    i64[n_f * 4]                 quad faces
    f64[n_v * 2]                 uv (only when has_uv)
    f64[n_v * 3]                 positions
    f64[n_v * 4]                 rotations (w, x, y, z)
    f64[n_v * 3]                 scales
    f64[n_v * 3]                 colors
    f64[n_v]                     opacities
"""

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .mesh import GaussianMesh, Topology, TopologyError
from .render import Camera

__all__ = [
    "FormatError",
    "load_obj",
    "save_obj",
    "load_cameras",
    "save_cameras",
    "load_png",
    "save_png",
    "save_mask_png",
    "frame_image_path",
    "load_frame_images",
    "count_frames",
    "save_checkpoint",
    "load_checkpoint",
    "write_json",
    "read_json",
]

MAGIC = b"TMGC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIiI")


class FormatError(ValueError):
    pass


# --- OBJ -----------------------------------------------------------------------

def _index(token, count, path, lineno):
    k = int(token)
    k = k - 1 if k > 0 else count + k
    if not 0 <= k < count:
        raise FormatError(f"{path}:{lineno}: index {token} out of range")
    return k


def load_obj(path):
    """Quad-only OBJ to ``(Topology, positions)``; UVs must be per-vertex."""
    path = Path(path)
    verts, tex, faces, corner_uv = [], [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vt":
                    tex.append([float(x) for x in parts[1:3]])
                elif tag == "f":
                    corners = parts[1:]
                    if len(corners) != 4:
                        raise FormatError(f"{path}:{lineno}: face has {len(corners)} vertices; "
                                          "only quads are supported")
                    face, uvs = [], []
                    for c in corners:
                        fields = c.split("/")
                        face.append(_index(fields[0], len(verts), path, lineno))
                        if len(fields) > 1 and fields[1]:
                            uvs.append(_index(fields[1], len(tex), path, lineno))
                        else:
                            uvs.append(None)
                    faces.append(face)
                    corner_uv.append((lineno, uvs))
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(f"{path}:{lineno}: malformed '{tag}' line") from None
    if not faces:
        raise FormatError(f"{path}: no faces")
    positions = np.array(verts, dtype=float).reshape(-1, 3)
    uv = None
    if tex:
        uv = np.full((len(verts), 2), np.nan)
        for (lineno, uvs), face in zip(corner_uv, faces):
            for v, t in zip(face, uvs):
                if t is None:
                    raise FormatError(f"{path}:{lineno}: face corner without a UV index")
                value = np.asarray(tex[t])
                if np.isnan(uv[v, 0]):
                    uv[v] = value
                elif not np.allclose(uv[v], value, rtol=0.0, atol=1e-9):
                    raise FormatError(f"{path}:{lineno}: vertex {v + 1} has conflicting UVs "
                                      f"{uv[v].tolist()} and {value.tolist()}; "
                                      "UVs must be per-vertex")
        uv = np.nan_to_num(uv, nan=0.0)
    try:
        topo = Topology(np.array(faces), uv, len(verts))
    except TopologyError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return topo, positions


def save_obj(path, mesh_or_positions, topology=None):
    """Write positions, per-vertex UVs and quad faces (``f v/vt`` with matching indices)."""
    if isinstance(mesh_or_positions, GaussianMesh):
        positions, topology = mesh_or_positions.positions, mesh_or_positions.topology
    else:
        positions = np.asarray(mesh_or_positions, float)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in positions]
    faces = topology.quad_faces + 1
    if topology.uv is not None:
        lines += [f"vt {u:.17g} {v:.17g}" for u, v in topology.uv]
        lines += ["f " + " ".join(f"{k}/{k}" for k in f) for f in faces]
    else:
        lines += ["f " + " ".join(str(k) for k in f) for f in faces]
    Path(path).write_text("\n".join(lines) + "\n")


# --- cameras -------------------------------------------------------------------

def save_cameras(path, cameras):
    write_json(path, {"cameras": [c.to_dict() for c in cameras]})


def load_cameras(path):
    data = read_json(path)
    try:
        return [Camera.from_dict(d) for d in data["cameras"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid camera rig: {exc}") from None


# --- images --------------------------------------------------------------------

def save_png(path, rgb):
    """Write an ``(h, w, 3)`` float image in ``[0, 1]`` as 8-bit RGB."""
    arr = np.clip(np.round(np.asarray(rgb, float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_mask_png(path, mask):
    arr = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_png(path):
    """Float RGB image in ``[0, 1]``."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=float) / 255.0


def frame_image_path(sequence_dir, frame, camera):
    return Path(sequence_dir) / f"frame_{frame:04d}" / f"cam_{camera:02d}.png"


def load_frame_images(sequence_dir, frame, n_cameras):
    images = []
    for k in range(n_cameras):
        p = frame_image_path(sequence_dir, frame, k)
        if not p.is_file():
            raise FileNotFoundError(f"missing frame image: {p}")
        images.append(load_png(p))
    return images


def count_frames(sequence_dir):
    """Number of consecutive ``frame_####`` directories starting at 0."""
    n = 0
    while (Path(sequence_dir) / f"frame_{n:04d}").is_dir():
        n += 1
    return n


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, mesh):
    topo = mesh.topology
    has_uv = topo.uv is not None
    parts = [
        _HEADER.pack(MAGIC, VERSION, mesh.n_v, topo.n_f, int(mesh.frame_index), int(has_uv)),
        np.ascontiguousarray(topo.quad_faces, dtype="<i8").tobytes(),
    ]
    if has_uv:
        parts.append(np.ascontiguousarray(topo.uv, dtype="<f8").tobytes())
    for arr in (mesh.positions, mesh.rotations, mesh.scales, mesh.colors, mesh.opacities):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, n_v, n_f, frame, has_uv = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = _HEADER.size

    def take(dtype, count, shape):
        nonlocal offset
        size = np.dtype(dtype).itemsize * count
        if offset + size > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += size
        return arr.astype(np.int64 if dtype == "<i8" else float)

    faces = take("<i8", n_f * 4, (n_f, 4))
    uv = take("<f8", n_v * 2, (n_v, 2)) if has_uv else None
    arrays = [take("<f8", n_v * k, (n_v, k)) for k in (3, 4, 3, 3, 1)]
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    topo = Topology(faces, uv, n_v)
    mesh = GaussianMesh(*arrays[:4], arrays[4][:, 0], topo, frame)
    # keep stored rotations bit-exact (the constructor re-normalizes)
    mesh.rotations = arrays[1]
    return mesh


# --- JSON ----------------------------------------------------------------------

def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
