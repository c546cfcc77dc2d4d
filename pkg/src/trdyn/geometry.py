"""Small-dimension rotation math: skew matrices, Rodrigues, quaternions.

Quaternions are scalar-first ``[w, x, y, z]`` with the Hamilton product.
All functions accept leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

ANGLE_EPS = 1e-12


def cross_product_matrix(k: np.ndarray) -> np.ndarray:
    """Return K with ``K @ v == np.cross(k, v)``.

    Args:
        k: (..., 3) vector(s).
    Returns:
        (..., 3, 3) skew-symmetric matrices.
    """
    k = np.asarray(k, dtype=np.float64)
    out = np.zeros(k.shape[:-1] + (3, 3))
    k1, k2, k3 = k[..., 0], k[..., 1], k[..., 2]
    out[..., 0, 1] = -k3
    out[..., 0, 2] = k2
    out[..., 1, 0] = k3
    out[..., 1, 2] = -k1
    out[..., 2, 0] = -k2
    out[..., 2, 1] = k1
    return out


def rodrigues(axis: np.ndarray, angle, tol: float = 1e-9) -> np.ndarray:
    """Rotation matrix ``I + sin(a) W + (1 - cos(a)) W^2`` for a unit axis.

    A zero angle returns the identity whatever the axis.
    """
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    norms = np.linalg.norm(axis, axis=-1)
    bad = (np.abs(norms - 1.0) > tol) & (angle != 0.0)
    if np.any(bad):
        raise ValueError(f"rodrigues: axis must be unit length, got norm {norms[bad].ravel()[0]!r}")
    W = cross_product_matrix(axis)
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    R = np.eye(3) + s * W + (1.0 - c) * (W @ W)
    return np.where((angle == 0.0)[..., None, None], np.eye(3), R)


def rotvec_to_rotmat(phi: np.ndarray) -> np.ndarray:
    """Exponential map of a rotation vector, identity when ``|phi| < 1e-12``."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < ANGLE_EPS
    safe = np.where(small, 1.0, theta)
    axis = phi / safe[..., None]
    axis = np.where(small[..., None], np.array([0.0, 0.0, 1.0]), axis)
    return rodrigues(axis, np.where(small, 0.0, theta))


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-normalize and flip to the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product ``q1 ⊗ q2``."""
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    w1, x1, y1, z1 = np.moveaxis(q1, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q2, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def quat_from_axis_angle(axis: np.ndarray, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def quat_to_rotmat(q: np.ndarray, normalize: bool = False, tol: float = 1e-6) -> np.ndarray:
    """Rotation matrix of a unit quaternion.

    Non-unit input (beyond ``tol``) raises unless ``normalize`` is set.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1)
    if normalize:
        q = q / n[..., None]
    elif np.any(np.abs(n - 1.0) > tol):
        raise ValueError("quat_to_rotmat: quaternion is not unit length")
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Quaternion (``w >= 0``) of a rotation matrix, Shepperd's branch selection.

    The branch is chosen by the largest of ``trace, R00, R11, R22`` so the
    divisor never approaches zero, including near 180 degree rotations.
    """
    R = np.asarray(R, dtype=np.float64)
    I = np.eye(3)
    orth_err = np.abs(np.swapaxes(R, -1, -2) @ R - I).max(axis=(-1, -2))
    det = np.linalg.det(R)
    if np.any(orth_err > tol) or np.any(np.abs(det - 1.0) > tol):
        raise ValueError("rotmat_to_quat: input is not a rotation matrix")

    flat = R.reshape(-1, 3, 3)
    m00, m11, m22 = flat[:, 0, 0], flat[:, 1, 1], flat[:, 2, 2]
    tr = m00 + m11 + m22
    branch = np.argmax(np.stack([tr, m00, m11, m22], axis=-1), axis=-1)
    q = np.empty((flat.shape[0], 4))

    b = branch == 0
    if b.any():
        s = 2.0 * np.sqrt(1.0 + tr[b])
        m = flat[b]
        q[b] = np.stack([0.25 * s, (m[:, 2, 1] - m[:, 1, 2]) / s,
                         (m[:, 0, 2] - m[:, 2, 0]) / s, (m[:, 1, 0] - m[:, 0, 1]) / s], axis=-1)
    b = branch == 1
    if b.any():
        m = flat[b]
        s = 2.0 * np.sqrt(1.0 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2])
        q[b] = np.stack([(m[:, 2, 1] - m[:, 1, 2]) / s, 0.25 * s,
                         (m[:, 0, 1] + m[:, 1, 0]) / s, (m[:, 0, 2] + m[:, 2, 0]) / s], axis=-1)
    b = branch == 2
    if b.any():
        m = flat[b]
        s = 2.0 * np.sqrt(1.0 + m[:, 1, 1] - m[:, 0, 0] - m[:, 2, 2])
        q[b] = np.stack([(m[:, 0, 2] - m[:, 2, 0]) / s, (m[:, 0, 1] + m[:, 1, 0]) / s,
                         0.25 * s, (m[:, 1, 2] + m[:, 2, 1]) / s], axis=-1)
    b = branch == 3
    if b.any():
        m = flat[b]
        s = 2.0 * np.sqrt(1.0 + m[:, 2, 2] - m[:, 0, 0] - m[:, 1, 1])
        q[b] = np.stack([(m[:, 1, 0] - m[:, 0, 1]) / s, (m[:, 0, 2] + m[:, 2, 0]) / s,
                         (m[:, 1, 2] + m[:, 2, 1]) / s, 0.25 * s], axis=-1)
    return quat_normalize(q).reshape(R.shape[:-2] + (4,))


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Geodesic angle (rad) between rotation matrices."""
    M = np.asarray(Ra) @ np.swapaxes(np.asarray(Rb), -1, -2)
    c = 0.5 * (np.trace(M, axis1=-2, axis2=-1) - 1.0)
    s = 0.5 * np.linalg.norm(np.stack([M[..., 2, 1] - M[..., 1, 2],
                                       M[..., 0, 2] - M[..., 2, 0],
                                       M[..., 1, 0] - M[..., 0, 1]], axis=-1), axis=-1)
    return np.arctan2(s, c)


def quat_angle(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Geodesic angle (rad) between unit quaternions, sign-invariant."""
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    conj = qb * np.array([1.0, -1.0, -1.0, -1.0])
    rel = quat_mul(qa, conj)
    return 2.0 * np.arctan2(np.linalg.norm(rel[..., 1:], axis=-1), np.abs(rel[..., 0]))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Logarithm map of unit quaternions; angle in ``[0, pi]``."""
    q = quat_normalize(q)
    n = np.linalg.norm(q[..., 1:], axis=-1)
    theta = 2.0 * np.arctan2(n, q[..., 0])
    scale = np.where(n < ANGLE_EPS, 2.0, theta / np.where(n < ANGLE_EPS, 1.0, n))
    return q[..., 1:] * scale[..., None]
