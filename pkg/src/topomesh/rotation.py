"""Quaternion helpers. Quaternions are stored as (w, x, y, z)."""

import numpy as np


def normalize(q, eps=1e-12):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / np.maximum(n, eps)


def conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def multiply(a, b):
    """Hamilton product ``a * b`` (broadcasts over leading axes)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def right_matrix(b):
    """Matrix M with ``multiply(a, b) == M @ a``."""
    b = np.asarray(b, dtype=float)
    w, x, y, z = np.moveaxis(b, -1, 0)
    rows = [
        [w, -x, -y, -z],
        [x, w, z, -y],
        [y, -z, w, x],
        [z, y, -x, w],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def to_matrix(q):
    """Rotation matrices for (possibly unnormalized) quaternions."""
    w, x, y, z = np.moveaxis(normalize(q), -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(m.shape[:-1] + (3, 3))


def to_matrix_backward(q, grad_r):
    """Pull ``dL/dR`` back to ``dL/dq`` through normalization and ``to_matrix``."""
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / norm
    w, x, y, z = np.moveaxis(qh, -1, 0)
    g = grad_r
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
              + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
              - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
              + y * g12 + x * g20 + y * g21)
    dqh = np.stack([dw, dx, dy, dz], axis=-1)
    return normalize_backward(qh, norm, dqh)


def normalize_backward(qh, norm, grad_qh):
    """Gradient through ``q -> q / |q|`` given the unit result and the norm."""
    radial = np.sum(qh * grad_qh, axis=-1, keepdims=True)
    return (grad_qh - radial * qh) / norm


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def shortest_arc(normals):
    """Quaternions rotating local +z onto each unit normal with no twist.

    The antipodal case (n = -z) uses a half turn about +x.
    """
    n = np.asarray(normals, dtype=float)
    n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)
    # q = (1 + z.n, z x n) normalized, with z x n = (-n_y, n_x, 0);
    # near n = -z, 1 + n_z is evaluated as (n_x^2 + n_y^2) / (1 - n_z) to avoid cancellation
    nz = n[..., 2]
    tangent = n[..., 0] ** 2 + n[..., 1] ** 2
    w = np.where(nz >= 0, 1.0 + nz, tangent / np.maximum(1.0 - nz, 1e-300))
    q = np.stack([w, -n[..., 1], n[..., 0], np.zeros_like(nz)], axis=-1)
    length = np.linalg.norm(q, axis=-1, keepdims=True)
    bad = length[..., 0] < 1e-100
    q = q / np.where(length < 1e-100, 1.0, length)
    q = np.where(bad[..., None], np.array([0.0, 1.0, 0.0, 0.0]), q)
    return normalize(q)
