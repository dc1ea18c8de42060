"""Fixed quad topology, Gaussian attribute storage and mesh queries.

Quads are split into triangles by the fixed diagonal ``(v0, v1, v2) + (v0, v2, v3)``
wherever triangles are needed.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import rotation

__all__ = [
    "TopologyError",
    "Topology",
    "GaussianMesh",
    "Adjacency",
    "build_adjacency",
    "default_lambda_w",
    "vertex_normals",
    "dihedral_angles",
    "dihedral_angles_backward",
    "triangulate",
    "min_ring_distance",
]


class TopologyError(ValueError):
    """Raised for structurally invalid meshes (bad indices, non-manifold edges)."""


@dataclass(frozen=True, eq=False)
class Topology:
    quad_faces: np.ndarray
    uv: np.ndarray | None = None
    n_v: int | None = None

    def __post_init__(self):
        faces = np.asarray(self.quad_faces, dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 4:
            raise TopologyError(f"quad_faces must have shape (n_f, 4), got {faces.shape}")
        n_v = self.n_v
        if n_v is None:
            n_v = int(faces.max()) + 1 if faces.size else 0
        if faces.size and (faces.min() < 0 or faces.max() >= n_v):
            raise TopologyError("face index out of range")
        for k, f in enumerate(faces):
            if len(set(f.tolist())) != 4:
                raise TopologyError(f"face {k} is degenerate (repeated vertex): {f.tolist()}")
        uv = self.uv
        if uv is not None:
            uv = np.asarray(uv, dtype=float)
            if uv.shape != (n_v, 2):
                raise TopologyError(f"uv must have shape ({n_v}, 2), got {uv.shape}")
            if np.any(uv < 0.0) or np.any(uv > 1.0):
                raise TopologyError("uv coordinates must lie in [0, 1]")
            uv.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "quad_faces", faces)
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "n_v", int(n_v))

    @property
    def n_f(self):
        return len(self.quad_faces)

    @property
    def n_e(self):
        return len(self.edges)

    @property
    def edges(self):
        """Unique undirected edges as an ``(n_e, 2)`` array with ``i < j``, sorted."""
        cached = self.__dict__.get("_edges")
        if cached is None:
            f = self.quad_faces
            e = np.concatenate([f[:, [k, (k + 1) % 4]] for k in range(4)])
            e.sort(axis=1)
            cached = np.unique(e, axis=0)
            cached.setflags(write=False)
            object.__setattr__(self, "_edges", cached)
        return cached


def triangulate(quad_faces):
    """Split quads into triangles with the fixed ``v0-v2`` diagonal."""
    f = np.asarray(quad_faces)
    return np.concatenate([f[:, [0, 1, 2]], f[:, [0, 2, 3]]])


@dataclass(eq=False)
class GaussianMesh:
    """One Gaussian per vertex, in topological order.

    Attribute arrays are mutated in place by the optimizer; everything else
    treats them as read-only.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    topology: Topology
    frame_index: int = 0

    def __post_init__(self):
        n = self.topology.n_v
        self.positions = np.array(self.positions, dtype=float).reshape(n, 3)
        self.rotations = rotation.normalize(np.array(self.rotations, dtype=float).reshape(n, 4))
        self.scales = np.array(self.scales, dtype=float).reshape(n, 3)
        self.colors = np.array(self.colors, dtype=float).reshape(n, 3)
        self.opacities = np.array(self.opacities, dtype=float).reshape(n)
        if np.any(self.scales <= 0):
            raise ValueError("scales must be strictly positive")

    @property
    def n_v(self):
        return self.topology.n_v

    def attributes(self):
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "scales": self.scales,
            "colors": self.colors,
            "opacities": self.opacities,
        }

    def copy(self, **changes):
        out = replace(
            self,
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            scales=self.scales.copy(),
            colors=self.colors.copy(),
            opacities=self.opacities.copy(),
        )
        for k, v in changes.items():
            setattr(out, k, v)
        return out


@dataclass(frozen=True, eq=False)
class Adjacency:
    one_ring: tuple
    edges: np.ndarray
    edge_face_pairs: np.ndarray
    interior_edges: np.ndarray
    w_ij: np.ndarray
    # directed pairs (i, j) for every j in one_ring(i), with the matching edge weight
    directed: np.ndarray = field(repr=False, default=None)
    directed_w: np.ndarray = field(repr=False, default=None)

    @property
    def n_e(self):
        return len(self.edges)


def _edge_lengths_sq(positions, edges):
    d = positions[edges[:, 1]] - positions[edges[:, 0]]
    return np.einsum("ij,ij->i", d, d)


def default_lambda_w(topology, frame0_positions):
    """Inverse squared mean frame-0 edge length (so ``w`` is about ``e^-1`` per edge)."""
    lengths = np.sqrt(_edge_lengths_sq(np.asarray(frame0_positions, float), topology.edges))
    mean = lengths.mean() if len(lengths) else 0.0
    return 1.0 / (mean * mean) if mean > 0 else 0.0


def build_adjacency(topology, frame0_positions, lambda_w=None):
    """One-rings, unique edges, edge-face incidence and frame-0 edge weights.

    ``lambda_w=None`` selects :func:`default_lambda_w`.
    """
    positions = np.asarray(frame0_positions, dtype=float)
    if positions.shape != (topology.n_v, 3):
        raise ValueError(f"expected positions of shape ({topology.n_v}, 3), got {positions.shape}")
    if lambda_w is None:
        lambda_w = default_lambda_w(topology, positions)
    if lambda_w < 0:
        raise ValueError("lambda_w must be >= 0")

    edges = topology.edges
    index = {(int(i), int(j)): k for k, (i, j) in enumerate(edges)}
    incident = [[] for _ in range(len(edges))]
    for fi, face in enumerate(topology.quad_faces):
        for k in range(4):
            a, b = int(face[k]), int(face[(k + 1) % 4])
            incident[index[(min(a, b), max(a, b))]].append(fi)
    pairs = np.full((len(edges), 2), -1, dtype=np.int64)
    for k, faces in enumerate(incident):
        if len(faces) > 2:
            i, j = edges[k]
            raise TopologyError(f"non-manifold edge ({i}, {j}) shared by {len(faces)} faces")
        pairs[k, : len(faces)] = faces
    interior = np.flatnonzero(pairs[:, 1] >= 0)

    rings = [[] for _ in range(topology.n_v)]
    for i, j in edges:
        rings[i].append(int(j))
        rings[j].append(int(i))
    one_ring = tuple(tuple(sorted(r)) for r in rings)

    w = np.exp(-lambda_w * _edge_lengths_sq(positions, edges))
    directed = np.concatenate([edges, edges[:, ::-1]])
    directed_w = np.concatenate([w, w])
    for arr in (edges, pairs, interior, w, directed, directed_w):
        arr.setflags(write=False)
    return Adjacency(one_ring, edges, pairs, interior, w, directed, directed_w)


def min_ring_distance(positions, adjacency):
    """Distance from each vertex to its nearest one-ring neighbour (inf if isolated)."""
    d = np.sqrt(_edge_lengths_sq(np.asarray(positions, float), adjacency.edges))
    out = np.full(len(adjacency.one_ring), np.inf)
    np.minimum.at(out, adjacency.edges[:, 0], d)
    np.minimum.at(out, adjacency.edges[:, 1], d)
    return out


def vertex_normals(mesh_or_positions, topology=None, previous=None):
    """Area-weighted vertex normals.

    Each quad contributes the sum of its two triangle cross products to its
    four corners. Vertices whose weighted sum vanishes fall back to
    ``previous`` when given, else +z.
    """
    if isinstance(mesh_or_positions, GaussianMesh):
        positions, topology = mesh_or_positions.positions, mesh_or_positions.topology
    else:
        positions = np.asarray(mesh_or_positions, dtype=float)
    f = topology.quad_faces
    p0, p1, p2, p3 = (positions[f[:, k]] for k in range(4))
    face_n = np.cross(p1 - p0, p2 - p0) + np.cross(p2 - p0, p3 - p0)
    acc = np.zeros((topology.n_v, 3))
    for k in range(4):
        np.add.at(acc, f[:, k], face_n)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    scale = max(float(np.abs(positions).max()) if positions.size else 1.0, 1.0)
    bad = norm[:, 0] <= 1e-14 * scale * scale
    out = acc / np.where(bad[:, None], 1.0, norm)
    if np.any(bad):
        fallback = np.tile([0.0, 0.0, 1.0], (topology.n_v, 1))
        if previous is not None:
            fallback = np.asarray(previous, dtype=float)
        out[bad] = fallback[bad]
    return out


# the triangle of a quad that holds quad edge k (k-th edge runs corner k -> k+1):
# edges 0, 1 lie in (v0, v1, v2); edges 2, 3 lie in (v0, v2, v3)
_EDGE_TRIANGLE = np.array([[0, 1, 2], [0, 1, 2], [0, 2, 3], [0, 2, 3]])


def _edge_triangles(topology, adjacency):
    """Corner indices of the two triangles flanking every interior edge."""
    faces = topology.quad_faces
    pairs = adjacency.edge_face_pairs[adjacency.interior_edges]
    edges = adjacency.edges[adjacency.interior_edges]
    tris = np.empty((len(pairs), 2, 3), dtype=np.int64)
    for e, (fa, fb) in enumerate(pairs):
        i, j = edges[e]
        for side, fi in enumerate((fa, fb)):
            face = faces[fi]
            for k in range(4):
                a, b = face[k], face[(k + 1) % 4]
                if {a, b} == {i, j}:
                    tris[e, side] = face[_EDGE_TRIANGLE[k]]
                    break
    return tris


def _cached_edge_triangles(topology, adjacency):
    cached = adjacency.__dict__.get("_tri_cache")
    if cached is None or cached[0] is not topology:
        cached = (topology, _edge_triangles(topology, adjacency))
        adjacency.__dict__["_tri_cache"] = cached
    return cached[1]


def dihedral_angles(mesh_or_positions, adjacency, topology=None, return_valid=False):
    """Angle between the triangle normals on either side of each interior edge.

    Returned in ``[0, pi]`` aligned with ``adjacency.interior_edges``; 0 means
    coplanar. Edges touching a zero-area triangle get ``nan`` and are reported
    invalid.
    """
    if isinstance(mesh_or_positions, GaussianMesh):
        positions, topology = mesh_or_positions.positions, mesh_or_positions.topology
    else:
        positions = np.asarray(mesh_or_positions, dtype=float)
    tris = _cached_edge_triangles(topology, adjacency)
    na, nb = _triangle_normals(positions, tris)
    la = np.linalg.norm(na, axis=1)
    lb = np.linalg.norm(nb, axis=1)
    valid = (la > 1e-300) & (lb > 1e-300)
    s = np.linalg.norm(np.cross(na, nb), axis=1)
    c = np.einsum("ij,ij->i", na, nb)
    theta = np.where(valid, np.arctan2(s, c), np.nan)
    if return_valid:
        return theta, valid
    return theta


def _triangle_normals(positions, tris):
    a = positions[tris[:, :, 0]]
    b = positions[tris[:, :, 1]]
    c = positions[tris[:, :, 2]]
    n = np.cross(b - a, c - a)
    return n[:, 0], n[:, 1]


def dihedral_angles_backward(positions, adjacency, topology, grad_theta):
    """Pull per-interior-edge ``dL/dtheta`` back to vertex positions.

    Entries with a degenerate triangle or with theta at exactly 0 or pi (where
    the angle is not differentiable) receive no gradient.
    """
    positions = np.asarray(positions, dtype=float)
    tris = _cached_edge_triangles(topology, adjacency)
    na, nb = _triangle_normals(positions, tris)
    la = np.linalg.norm(na, axis=1, keepdims=True)
    lb = np.linalg.norm(nb, axis=1, keepdims=True)
    ua = na / np.where(la > 0, la, 1.0)
    ub = nb / np.where(lb > 0, lb, 1.0)
    c = np.einsum("ij,ij->i", ua, ub)[:, None]
    s = np.linalg.norm(np.cross(ua, ub), axis=1, keepdims=True)
    g = np.nan_to_num(np.asarray(grad_theta, dtype=float))[:, None]
    ok = (s > 1e-12) & (la > 0) & (lb > 0)
    s_safe = np.where(ok, s, 1.0)
    # d theta / d n_a = -(u_b - c u_a) / (s |n_a|)
    gna = np.where(ok, -g * (ub - c * ua) / (s_safe * np.where(la > 0, la, 1.0)), 0.0)
    gnb = np.where(ok, -g * (ua - c * ub) / (s_safe * np.where(lb > 0, lb, 1.0)), 0.0)
    out = np.zeros_like(positions)
    for side, gn in ((0, gna), (1, gnb)):
        t = tris[:, side]
        a, b, cc = positions[t[:, 0]], positions[t[:, 1]], positions[t[:, 2]]
        gb = np.cross(cc - a, gn)
        gc = np.cross(gn, b - a)
        np.add.at(out, t[:, 1], gb)
        np.add.at(out, t[:, 2], gc)
        np.add.at(out, t[:, 0], -(gb + gc))
    return out
