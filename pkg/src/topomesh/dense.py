"""Dense UV lattice over the base quads, mesh extraction and texture baking."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import rotation
from .mesh import GaussianMesh, Topology, build_adjacency, min_ring_distance, triangulate

__all__ = [
    "DenseGaussianMesh",
    "TextureMap",
    "bilinear_sample",
    "densify_uv",
    "refresh_dense_positions",
    "normal_expansion",
    "bake_texture",
    "sample_texture",
]

log = logging.getLogger(__name__)

DILATION_PASSES = 8


def bilinear_sample(a00, a0n, an0, ann, i, j, n):
    """Attribute at lattice site ``(i, j)`` of an ``n x n`` lattice from its corner values.

    Corners are ``A[0,0]``, ``A[0,n-1]``, ``A[n-1,0]``, ``A[n-1,n-1]``.
    """
    if n < 2:
        raise ValueError("lattice size n must be >= 2")
    d = float(n - 1)
    w = np.array([(d - i) * (d - j), (d - i) * j, i * (d - j), i * j]) / (d * d)
    corners = [np.asarray(a, float) for a in (a00, a0n, an0, ann)]
    return sum(wk * c for wk, c in zip(w, corners))


@dataclass(eq=False)
class DenseGaussianMesh:
    """Gaussians on the per-quad UV lattice.

    ``corners[k]`` lists the base vertices ``(v0, v1, v3, v2)`` of the quad that
    generated site ``k`` (the lattice corners ``A00, A0N, AN0, ANN``) and
    ``weights[k]`` the matching bilinear weights. Sites on shared base edges
    and vertices appear once.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    uv: np.ndarray
    corners: np.ndarray
    weights: np.ndarray
    topology: Topology
    base_topology: Topology
    n: int
    frame_index: int = 0

    @property
    def n_v(self):
        return len(self.positions)

    def attributes(self):
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "scales": self.scales,
            "colors": self.colors,
            "opacities": self.opacities,
        }

    def as_gaussian_mesh(self):
        return GaussianMesh(self.positions, self.rotations, self.scales, self.colors,
                            self.opacities, self.topology, self.frame_index)

    def copy(self):
        out = DenseGaussianMesh(
            self.positions.copy(), self.rotations.copy(), self.scales.copy(),
            self.colors.copy(), self.opacities.copy(), self.uv, self.corners, self.weights,
            self.topology, self.base_topology, self.n, self.frame_index)
        if hasattr(self, "_adjacency"):
            out._adjacency = self._adjacency
        return out


@dataclass
class TextureMap:
    """Baked ``(R, R, 3)`` texture; texel ``(x, y)`` covers UV ``((x+.5)/R, (y+.5)/R)``."""

    rgb: np.ndarray
    mask: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def resolution(self):
        return self.rgb.shape[0]


def _lattice(base_topology, n):
    """Site numbering, corner indices, weights and dense quads for an ``n x n`` lattice per face."""
    faces = base_topology.quad_faces
    d = n - 1
    keys = {}
    corners, weights = [], []
    for v in range(base_topology.n_v):
        keys[("v", v)] = v
        corners.append((v, v, v, v))
        weights.append((1.0, 0.0, 0.0, 0.0))
    grid = np.empty((len(faces), n, n), dtype=np.int64)
    for fi, (v0, v1, v2, v3) in enumerate(faces.tolist()):
        cvals = (v0, v1, v3, v2)
        for i in range(n):
            for j in range(n):
                on_i = i in (0, d)
                on_j = j in (0, d)
                if on_i and on_j:
                    key = ("v", cvals[(i == d) * 2 + (j == d)])
                elif on_i or on_j:
                    # site on a base edge: key by sorted endpoints and steps from the lower one
                    if on_i:
                        a, b, step = cvals[(i == d) * 2], cvals[(i == d) * 2 + 1], j
                    else:
                        a, b, step = cvals[(j == d)], cvals[2 + (j == d)], i
                    if a > b:
                        a, b, step = b, a, d - step
                    key = ("e", a, b, step)
                else:
                    key = ("f", fi, i, j)
                idx = keys.get(key)
                if idx is None:
                    idx = len(corners)
                    keys[key] = idx
                    corners.append(cvals)
                    weights.append(((d - i) * (d - j) / d**2, (d - i) * j / d**2,
                                    i * (d - j) / d**2, i * j / d**2))
                grid[fi, i, j] = idx
    quads = np.stack([grid[:, :-1, :-1], grid[:, :-1, 1:], grid[:, 1:, 1:], grid[:, 1:, :-1]],
                     axis=-1).reshape(-1, 4)
    return np.array(corners, dtype=np.int64), np.array(weights), quads


def _interp(values, corners, weights):
    return np.einsum("mk,mkc->mc", weights, values[corners])


def _interp_rotations(rots, corners, weights):
    q = rots[corners]
    # align hemispheres with the first corner so q and -q do not cancel
    sign = np.where(np.sum(q * q[:, :1], axis=-1) < 0, -1.0, 1.0)
    return rotation.normalize(np.einsum("mk,mkc->mc", weights, q * sign[..., None]))


def _lattice_scales(positions, adjacency):
    s = min_ring_distance(positions, adjacency)
    s = np.where(np.isfinite(s), s, np.nanmax(np.where(np.isfinite(s), s, np.nan)))
    return np.repeat(s[:, None], 3, axis=1)


def densify_uv(base, n=30):
    """Dense Gaussians sampled on an ``n x n`` lattice in every quad of ``base``.

    Positions, UVs and colours are bilinear in the corners, rotations are
    normalized blends and every scale is the nearest lattice-neighbour
    distance. Opacities are 1. ``n=2`` reproduces the base vertices.
    """
    if n < 2:
        raise ValueError("lattice size n must be >= 2")
    topo = base.topology
    if topo.uv is None:
        raise ValueError("base mesh has no UV coordinates")
    corners, weights, quads = _lattice(topo, n)
    uv = np.clip(_interp(np.asarray(topo.uv), corners, weights), 0.0, 1.0)
    dense_topo = Topology(quads, uv, len(corners))
    positions = _interp(base.positions, corners, weights)
    dense = DenseGaussianMesh(
        positions,
        _interp_rotations(base.rotations, corners, weights),
        np.ones((len(corners), 3)),
        np.clip(_interp(base.colors, corners, weights), 0.0, 1.0),
        np.ones(len(corners)),
        uv, corners, weights, dense_topo, topo, n, base.frame_index,
    )
    dense._adjacency = build_adjacency(dense_topo, positions, lambda_w=0.0)
    dense.scales = _lattice_scales(positions, dense._adjacency)
    return dense


def refresh_dense_positions(dense, base):
    """Dense mesh re-anchored to a new base frame: positions, scales and rotations follow.

    Colours carry over so they warm-start the next frame.
    """
    out = dense.copy()
    out.positions = _interp(base.positions, dense.corners, dense.weights)
    out.rotations = _interp_rotations(base.rotations, dense.corners, dense.weights)
    adjacency = getattr(dense, "_adjacency", None)
    if adjacency is None:
        adjacency = build_adjacency(dense.topology, out.positions, lambda_w=0.0)
    out._adjacency = adjacency
    out.scales = _lattice_scales(out.positions, adjacency)
    out.frame_index = base.frame_index
    return out


def normal_expansion(mesh, normals):
    """Push each vertex along its normal to the surface of its Gaussian's ellipsoid.

    With ``n' = R^T n`` in the Gaussian's frame the offset is
    ``sqrt(1 / sum_k n'_k^2 / s_k^2)``. Zero-length normals leave the vertex
    where it is.
    """
    normals = np.asarray(normals, float)
    length = np.linalg.norm(normals, axis=1)
    skip = length <= 1e-12
    unit = normals / np.where(skip, 1.0, length)[:, None]
    rot = rotation.to_matrix(mesh.rotations)
    local = np.einsum("nji,nj->ni", rot, unit)
    with np.errstate(divide="ignore"):
        offset = np.sqrt(1.0 / np.sum(local**2 / mesh.scales**2, axis=1))
    offset[skip] = 0.0
    if np.any(skip):
        log.warning("normal expansion skipped %d vertices with zero-length normals",
                    int(skip.sum()))
    return mesh.positions + offset[:, None] * unit


def _signed_area(a, b, c):
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) -
                  (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def _dilate(rgb, covered, passes):
    rgb = rgb.copy()
    filled = covered.copy()
    r = rgb.shape[0]
    for _ in range(passes):
        acc = np.zeros_like(rgb)
        cnt = np.zeros(filled.shape)
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)):
            src = np.zeros_like(filled)
            col = np.zeros_like(rgb)
            ys = slice(max(dy, 0), r + min(dy, 0))
            yd = slice(max(-dy, 0), r + min(-dy, 0))
            xs = slice(max(dx, 0), r + min(dx, 0))
            xd = slice(max(-dx, 0), r + min(-dx, 0))
            src[yd, xd] = filled[ys, xs]
            col[yd, xd] = rgb[ys, xs]
            acc += col * src[..., None]
            cnt += src
        grow = (~filled) & (cnt > 0)
        rgb[grow] = acc[grow] / cnt[grow][:, None]
        filled |= grow
    return rgb, filled


def bake_texture(dense, resolution=1024, pad_color=(0.0, 0.0, 0.0)):
    """Rasterize the dense triangles in UV space and interpolate their colours.

    A texel takes the first triangle (in index order) that covers its
    center. Triangles folded in UV space are skipped and counted, as are
    texels claimed by more than one triangle. Uncovered texels stay out of
    ``mask`` and are filled by a few passes of neighbour dilation, then
    ``pad_color``.
    """
    r = int(resolution)
    if r < 1:
        raise ValueError("texture resolution must be >= 1")
    tris = triangulate(dense.topology.quad_faces)
    uv = np.asarray(dense.topology.uv, float) * r - 0.5  # texel-center coordinates
    a, b, c = uv[tris[:, 0]], uv[tris[:, 1]], uv[tris[:, 2]]
    area = _signed_area(a, b, c)
    # the dominant orientation is "front"; the rest are folded over
    front = 1.0 if area[area > 0].sum() >= -area[area < 0].sum() else -1.0
    keep = area * front > 1e-15
    n_flipped = int(np.sum(area * front < -1e-15))
    kept = np.flatnonzero(keep)
    a, b, c, area = a[kept], b[kept], c[kept], area[kept]
    lo = np.floor(np.minimum(np.minimum(a, b), c)).astype(int)
    hi = np.ceil(np.maximum(np.maximum(a, b), c)).astype(int)
    lo = np.clip(lo, 0, r - 1)
    hi = np.clip(hi, 0, r - 1)
    wx = hi[:, 0] - lo[:, 0] + 1
    wy = hi[:, 1] - lo[:, 1] + 1
    counts = wx * wy
    tri_of = np.repeat(np.arange(len(kept)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - start
    px = lo[tri_of, 0] + local % wx[tri_of]
    py = lo[tri_of, 1] + local // wx[tri_of]
    p = np.stack([px, py], axis=1).astype(float)
    w0 = _signed_area(p, b[tri_of], c[tri_of]) / area[tri_of]
    w1 = _signed_area(a[tri_of], p, c[tri_of]) / area[tri_of]
    w2 = 1.0 - w0 - w1
    tol = 1e-9
    inside = (w0 >= -tol) & (w1 >= -tol) & (w2 >= -tol)
    strict = (w0 > tol) & (w1 > tol) & (w2 > tol)
    texel = py * r + px
    sel = np.flatnonzero(inside)
    # pairs are in triangle order, so the first occurrence per texel is the first writer
    _, first = np.unique(texel[sel], return_index=True)
    win = sel[first]
    strict_texels, strict_counts = np.unique(texel[strict], return_counts=True)
    n_overlap = int(np.sum(strict_counts > 1))

    colors = np.asarray(dense.colors, float)
    tri_idx = tris[kept[tri_of[win]]]
    rgb = np.zeros((r * r, 3))
    rgb[texel[win]] = (w0[win, None] * colors[tri_idx[:, 0]] + w1[win, None] * colors[tri_idx[:, 1]]
                       + w2[win, None] * colors[tri_idx[:, 2]])
    covered = np.zeros(r * r, dtype=bool)
    covered[texel[win]] = True
    rgb = rgb.reshape(r, r, 3)
    covered = covered.reshape(r, r)
    filled_rgb, filled = _dilate(rgb, covered, DILATION_PASSES)
    filled_rgb[~filled] = pad_color
    diagnostics = {"flipped_triangles": n_flipped, "overlap_texels": n_overlap,
                   "covered_texels": int(covered.sum())}
    if n_flipped:
        log.info("bake skipped %d triangles folded in UV space", n_flipped)
    return TextureMap(np.clip(filled_rgb, 0.0, 1.0), covered, diagnostics)


def sample_texture(texture, uv):
    """Bilinear lookup at UVs using the texel-center convention, clamped at the border."""
    tex = np.asarray(texture, float)
    r_y, r_x = tex.shape[:2]
    uv = np.asarray(uv, float)
    x = np.clip(uv[..., 0] * r_x - 0.5, 0.0, r_x - 1.0)
    y = np.clip(uv[..., 1] * r_y - 0.5, 0.0, r_y - 1.0)
    x0 = np.minimum(np.floor(x).astype(int), r_x - 2 if r_x > 1 else 0)
    y0 = np.minimum(np.floor(y).astype(int), r_y - 2 if r_y > 1 else 0)
    x1 = np.minimum(x0 + 1, r_x - 1)
    y1 = np.minimum(y0 + 1, r_y - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    return ((1 - fx) * (1 - fy) * tex[y0, x0] + fx * (1 - fy) * tex[y0, x1]
            + (1 - fx) * fy * tex[y1, x0] + fx * fy * tex[y1, x1])
