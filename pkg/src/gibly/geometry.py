"""Rotations and the canonical frame shared by every kernel.

Rotation convention: ``R = Rz(phi_z) @ Ry(phi_y) @ Rx(phi_x)``, angles in radians.
A neighbour ``x`` of query ``q`` is expressed in a kernel's canonical frame as
``z = R.T @ (x - q)``. The kernel axis is the canonical z-axis: ``h = z[2]`` and
the radial distance from the axis is ``rho = sqrt(z[0]**2 + z[1]**2)``.
"""

from typing import NamedTuple

import numpy as np

from ._accel import njit


class RotationAngles(NamedTuple):
    phi_x: float = 0.0
    phi_y: float = 0.0
    phi_z: float = 0.0


class CanonicalOffset(NamedTuple):
    z1: float
    z2: float
    z3: float

    @property
    def rho(self):
        return float(radial_distance(self.z1, self.z2))

    @property
    def h(self):
        return self.z3


def radial_distance(z1, z2):
    """Distance from the canonical z-axis; the one place the radial measure is defined."""
    return np.sqrt(z1 * z1 + z2 * z2)


_radial_distance_nb = njit(radial_distance)


def _axis_rotations(phi_x, phi_y, phi_z):
    cx, sx = np.cos(phi_x), np.sin(phi_x)
    cy, sy = np.cos(phi_y), np.sin(phi_y)
    cz, sz = np.cos(phi_z), np.sin(phi_z)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    return (rx, ry, rz), (drx, dry, drz)


def rotation_matrix(angles):
    """Rotation matrix ``Rz @ Ry @ Rx`` for ``angles = (phi_x, phi_y, phi_z)``."""
    (rx, ry, rz), _ = _axis_rotations(*(float(a) for a in angles))
    return rz @ ry @ rx


def rotation_matrix_grad(angles):
    """Partial derivatives of :func:`rotation_matrix` w.r.t. each angle.

    Returns
    -------
    tuple of three (3, 3) arrays
        ``(dR/dphi_x, dR/dphi_y, dR/dphi_z)``.
    """
    (rx, ry, rz), (drx, dry, drz) = _axis_rotations(*(float(a) for a in angles))
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def rotation_matrices(angles):
    """Batched :func:`rotation_matrix` and its gradients for an (m, 3) angle array.

    Returns ``(R, dR)`` with shapes (m, 3, 3) and (m, 3, 3, 3); ``dR[j, k]`` is
    the derivative of ``R[j]`` w.r.t. angle ``k``.
    """
    angles = np.asarray(angles, dtype=np.float64).reshape(-1, 3)
    m = angles.shape[0]
    R = np.empty((m, 3, 3))
    dR = np.empty((m, 3, 3, 3))
    for j in range(m):
        R[j] = rotation_matrix(angles[j])
        dR[j] = np.stack(rotation_matrix_grad(angles[j]))
    return R, dR


def canonical_offset(query, neighbor, angles):
    """Express ``neighbor - query`` in the frame rotated by ``angles``.

    The subtraction happens before any rotation arithmetic, so translating both
    points by the same vector changes nothing whenever that translation is
    itself exact in floating point.
    """
    d = np.subtract(np.asarray(neighbor, dtype=np.float64), np.asarray(query, dtype=np.float64))
    z = rotation_matrix(angles).T @ d
    return CanonicalOffset(float(z[0]), float(z[1]), float(z[2]))


def wrap_angle(a):
    """Map angles into (-pi, pi]; values already in range are returned untouched."""
    a = np.asarray(a, dtype=np.float64)
    out = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    return np.where((a > np.pi) | (a <= -np.pi), out, a)
