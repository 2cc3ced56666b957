"""Rotation representations and rigid transforms along a kinematic tree.

All functions accept arbitrary leading batch dimensions. Angles are in
radians, lengths in millimetres.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this angle the trigonometric coefficients of the exponential map
# (and their derivatives) are evaluated from their Taylor series.
SMALL_ANGLE = 1e-3


class DegenerateMatrixError(ValueError):
    """Raised when a 3x3 matrix has rank < 2 and cannot be projected to SO(3)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def hat(v):
    """Skew-symmetric cross-product matrix of (..., 3) vectors."""
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    return np.stack([
        np.stack([z, -v[..., 2], v[..., 1]], -1),
        np.stack([v[..., 2], z, -v[..., 0]], -1),
        np.stack([-v[..., 1], v[..., 0], z], -1),
    ], -2)


def vee_antisym(M):
    """(M21 - M12, M02 - M20, M10 - M01); <M, hat(w)> == w . vee_antisym(M)."""
    return np.stack([
        M[..., 2, 1] - M[..., 1, 2],
        M[..., 0, 2] - M[..., 2, 0],
        M[..., 1, 0] - M[..., 0, 1],
    ], -1)


def _exp_coefficients(theta):
    """a = sin t / t, b = (1 - cos t) / t^2 and da/t, db/t (derivatives over t)."""
    t2 = theta * theta
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    s, c = np.sin(safe), np.cos(safe)
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120 - t2**3 / 5040, s / safe)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720 - t2**3 / 40320,
                 (1 - c) / safe**2)
    da = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840,
                  (safe * c - s) / safe**3)
    db = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720,
                  (safe * s - 2 * (1 - c)) / safe**4)
    return a, b, da, db


def rodrigues(aa):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)
    a, b, _, _ = _exp_coefficients(theta)
    K = hat(aa)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rodrigues_vjp(aa, grad_R):
    """Pull a gradient w.r.t. rodrigues(aa) back to aa."""
    aa = np.asarray(aa, dtype=float)
    theta = np.linalg.norm(aa, axis=-1)
    a, b, da, db = _exp_coefficients(theta)
    K = hat(aa)
    KK = K @ K
    gK = np.sum(grad_R * K, axis=(-2, -1))
    gKK = np.sum(grad_R * KK, axis=(-2, -1))
    # d(K^2)/dv_i = E_i K + K E_i; <G, E_i K + K E_i> = -vee(G K + K G)_i
    sym = grad_R @ K + K @ grad_R
    return ((da * gK + db * gKK)[..., None] * aa
            + a[..., None] * vee_antisym(grad_R)
            - b[..., None] * vee_antisym(sym))


def rotation_to_axis_angle(R):
    """Rotation matrices (..., 3, 3) to axis-angle vectors with angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    out = np.zeros((R.shape[0], 3))
    cos = np.clip((np.trace(R, axis1=1, axis2=2) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    w = vee_antisym(R) / 2  # sin(theta) * axis
    sin = np.linalg.norm(w, axis=-1)
    near_pi = cos < -0.99
    regular = ~near_pi
    # atan2 keeps full precision at small angles where arccos does not
    theta_r = np.arctan2(sin[regular], cos[regular])
    scale = np.where(theta_r < SMALL_ANGLE, 1 + theta_r**2 / 6,
                     theta_r / np.where(sin[regular] > 0, sin[regular], 1.0))
    out[regular] = w[regular] * scale[:, None]
    for i in np.flatnonzero(near_pi):
        # axis from the column of n n^T with the largest diagonal; at exactly
        # pi this is the column of (R + I) / 2
        S = (R[i] + R[i].T) / 2
        B = (S - cos[i] * np.eye(3)) / (1 - cos[i])
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(B[k, k])
        axis /= np.linalg.norm(axis)
        # fix the sign from the antisymmetric part (zero exactly at pi)
        if np.dot(axis, w[i]) < 0:
            axis = -axis
        th = np.arctan2(sin[i], cos[i]) if sin[i] > 0 else theta[i]
        out[i] = axis * th
    return out.reshape(*batch, 3)


def canonical_axis_angle(aa):
    """Map axis-angle vectors to the equivalent one with angle in [0, pi]."""
    return rotation_to_axis_angle(rodrigues(aa))


def project_to_so3(M):
    """Nearest proper rotation (Frobenius norm) of each (..., 3, 3) matrix."""
    return _so3_svd(M)[0]


def _so3_svd(M):
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("project_to_so3: non-finite input")
    U, s, Vt = np.linalg.svd(M)
    bad = (s[..., 1] <= 1e-12 * s[..., 0]) | (s[..., 0] == 0)
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise DegenerateMatrixError(
            f"rank < 2 matrix at index {tuple(int(i) for i in idx)}; "
            "cannot project to a rotation", index=tuple(int(i) for i in idx))
    d = np.sign(np.linalg.det(U @ Vt))
    d = np.where(d == 0, 1.0, d)
    # signed SVD: M = (U D)(D S) V^T with D = diag(1, 1, d)
    U = U.copy()
    U[..., :, 2] *= d[..., None]
    s = s.copy()
    s[..., 2] *= d
    return U @ Vt, (U, s, Vt)


def project_to_so3_vjp(M, grad_R):
    """Gradient of a loss w.r.t. M given its gradient w.r.t. project_to_so3(M).

    Uses the differential of the polar factor; requires pairwise sums of
    the (sign-corrected) singular values to be nonzero.
    """
    _, (U, s, Vt) = _so3_svd(M)
    V = np.swapaxes(Vt, -1, -2)
    H = np.swapaxes(U, -1, -2) @ grad_R @ V
    denom = s[..., :, None] + s[..., None, :]
    eye = np.eye(3, dtype=bool)
    denom = np.where(eye, 1.0, denom)
    A = np.where(eye, 0.0, (H - np.swapaxes(H, -1, -2)) / denom)
    return U @ A @ Vt


def rotation_to_quat(R):
    """Rotation matrices to unit quaternions (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    m = R
    tr = np.trace(m, axis1=1, axis2=2)
    # Shepperd: pick the largest of 4w^2, 4x^2, 4y^2, 4z^2 for stability
    cand = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], -1)
    k = np.argmax(cand, axis=-1)
    q = np.empty((R.shape[0], 4))
    for case in range(4):
        sel = k == case
        if not np.any(sel):
            continue
        r = m[sel]
        if case == 0:
            t = np.sqrt(1 + tr[sel]) * 2
            q[sel] = np.stack([t / 4, (r[:, 2, 1] - r[:, 1, 2]) / t,
                               (r[:, 0, 2] - r[:, 2, 0]) / t,
                               (r[:, 1, 0] - r[:, 0, 1]) / t], -1)
        elif case == 1:
            t = np.sqrt(1 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2]) * 2
            q[sel] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / t, t / 4,
                               (r[:, 0, 1] + r[:, 1, 0]) / t,
                               (r[:, 0, 2] + r[:, 2, 0]) / t], -1)
        elif case == 2:
            t = np.sqrt(1 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2]) * 2
            q[sel] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / t,
                               (r[:, 0, 1] + r[:, 1, 0]) / t, t / 4,
                               (r[:, 1, 2] + r[:, 2, 1]) / t], -1)
        else:
            t = np.sqrt(1 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1]) * 2
            q[sel] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / t,
                               (r[:, 0, 2] + r[:, 2, 0]) / t,
                               (r[:, 1, 2] + r[:, 2, 1]) / t, t / 4], -1)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q.reshape(*batch, 4)


def quat_to_rotation(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def quat_distance(q1, q2):
    """Geodesic angle between rotations given as unit quaternions."""
    dot = np.abs(np.sum(np.asarray(q1) * np.asarray(q2), axis=-1))
    return 2 * np.arccos(np.minimum(1.0, dot))


@dataclass(frozen=True)
class KinematicTree:
    """Parent index per joint; the root has parent -1."""

    parents: tuple

    def __post_init__(self):
        p = self.parents
        if sum(1 for x in p if x < 0) != 1 or p[0] >= 0:
            raise ValueError("kinematic tree needs exactly one root at index 0")
        for i, x in enumerate(p[1:], start=1):
            if not 0 <= x < i:
                raise ValueError(f"joint {i}: parent {x} violates topological order")

    def __len__(self):
        return len(self.parents)

    @property
    def children(self):
        ch = [[] for _ in self.parents]
        for i, p in enumerate(self.parents[1:], start=1):
            ch[p].append(i)
        return ch


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return points @ self.rotation.T + self.translation


def compose_global_transforms(parents, rotations, joints_rest):
    """World transforms of every part of a posed kinematic tree.

    Part i is rotated by ``rotations[..., i]`` about its rest joint and then
    carried along by its parent. A rest-pose point p of part i lands at
    ``R[..., i] @ p + t[..., i]``.

    Returns ``(R, t)`` with shapes (..., K, 3, 3) and (..., K, 3).
    """
    rotations = np.asarray(rotations, dtype=float)
    joints_rest = np.asarray(joints_rest, dtype=float)
    batch = np.broadcast_shapes(rotations.shape[:-3], joints_rest.shape[:-2])
    K = len(parents)
    GR = np.empty(batch + (K, 3, 3))
    Gt = np.empty(batch + (K, 3))
    rotations = np.broadcast_to(rotations, batch + (K, 3, 3))
    joints_rest = np.broadcast_to(joints_rest, batch + (K, 3))
    for i in range(K):
        Ri, ji = rotations[..., i, :, :], joints_rest[..., i, :]
        local_t = ji - np.einsum('...ab,...b->...a', Ri, ji)
        p = parents[i]
        if p < 0:
            GR[..., i, :, :] = Ri
            Gt[..., i, :] = local_t
        else:
            GR[..., i, :, :] = GR[..., p, :, :] @ Ri
            Gt[..., i, :] = np.einsum('...ab,...b->...a', GR[..., p, :, :], local_t) + Gt[..., p, :]
    return GR, Gt
