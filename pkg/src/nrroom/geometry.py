"""Rotations (6D parameterization) and panorama direction mapping.

World frame is Z-up. Panorama longitude ``phi`` runs from -pi at the left
edge to +pi at the right edge, latitude ``theta`` from +pi/2 at the top row
to -pi/2 at the bottom.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .errors import DegenerateRotation

_PARALLEL_TOL = 1e-9


def rot6d_to_matrix(r6):
    """Gram-Schmidt the two stacked 3-vectors of ``r6`` into a rotation.

    The first half becomes the first column, the orthogonalized second half
    the second column, and their cross product the third.
    """
    r6 = np.asarray(r6, dtype=np.float64).reshape(6)
    a1, a2 = r6[:3], r6[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-12:
        raise DegenerateRotation("first half of r6 is zero")
    b1 = a1 / n1
    u = a2 - (b1 @ a2) * b1
    nu = np.linalg.norm(u)
    if nu < _PARALLEL_TOL * max(1.0, np.linalg.norm(a2)):
        raise DegenerateRotation("halves of r6 are zero or parallel")
    b2 = u / nu
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def rot6d_to_matrix_torch(r6):
    """Differentiable batch version; ``r6`` is ``(..., 6)``, returns ``(..., 3, 3)``."""
    a1, a2 = r6[..., :3], r6[..., 3:]
    b1 = a1 / torch.linalg.norm(a1, dim=-1, keepdim=True)
    u = a2 - (b1 * a2).sum(dim=-1, keepdim=True) * b1
    b2 = u / torch.linalg.norm(u, dim=-1, keepdim=True)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(R):
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[:, 0], R[:, 1]])


def axis_angle_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def yaw_matrix(angle):
    return axis_angle_matrix((0.0, 0.0, 1.0), angle)


def quat_to_matrix(q):
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def geodesic_angle(Ra, Rb):
    """Angle of ``Ra^T Rb`` in radians."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def is_rotation(R, tol=1e-9):
    R = np.asarray(R)
    return (R.shape == (3, 3) and np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol)


# ---------------------------------------------------------------------------
# Equirectangular mapping
# ---------------------------------------------------------------------------

def equirect_angles(u, v, W, H):
    phi = 2.0 * np.pi * (np.asarray(u, dtype=np.float64) + 0.5) / W - np.pi
    theta = np.pi / 2.0 - np.pi * (np.asarray(v, dtype=np.float64) + 0.5) / H
    return phi, theta


def angles_to_dir(phi, theta):
    ct = np.cos(theta)
    return np.stack([ct * np.cos(phi), ct * np.sin(phi), np.sin(theta)], axis=-1)


def equirect_dir(u, v, W, H):
    """Unit direction for (fractional) pixel ``(u, v)``; broadcasts."""
    return angles_to_dir(*equirect_angles(u, v, W, H))


def dir_to_equirect(d, W, H):
    """Continuous pixel coordinates ``(u, v)`` whose center maps to ``d``."""
    d = np.asarray(d, dtype=np.float64)
    phi = np.arctan2(d[..., 1], d[..., 0])
    theta = np.arcsin(np.clip(d[..., 2], -1.0, 1.0))
    u = (phi + np.pi) * W / (2.0 * np.pi) - 0.5
    v = (np.pi / 2.0 - theta) * H / np.pi - 0.5
    return u, v


def equirect_grid(W, H):
    """Directions for every pixel center, shape ``(H, W, 3)``."""
    vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return equirect_dir(uu, vv, W, H)


def orthonormal_basis(d):
    """Two unit vectors completing ``d`` to a right-handed frame."""
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    return u, w
