"""The eight geometric kernels and their analytic parameter gradients.

Every kernel is ``psi = exp(-E)`` for a non-negative exponent ``E`` evaluated on
the canonical offset ``z = R.T @ (x - q)`` with ``rho = sqrt(z1^2 + z2^2)`` and
``h = z3``:

=================  ==========================================================
Cylinder           ``rho^2 / (2 r^2)``
HollowCylinder     ``(rho - r)^2 / (2 t^2)``
Cone               ``rho^2 / (2 s^2)``, ``s = r * max(h, 1e-3) * tan(beta*pi)``
HollowCone         ``(rho - s)^2 / (2 t^2)``
Disk               ``rho^2 / (2 r^2) * |w - h|``
HollowDisk         ``(rho - r)^2 / (2 t^2) * |w - h|``
Ellipsoid          ``q / 2`` with ``q = sum_k pos(l_k) z_k^2``
HollowEllipsoid    ``(sqrt(q) - r)^2 / (2 t^2)``
=================  ==========================================================

``q`` equals ``d.T @ Lambda @ d`` for ``Lambda = R diag(pos(l)) R.T``, and
``pos(l) = log(1 + exp(l)) + 1e-6``.

Parameters of one kernel are packed into a length-10 row
``[phi_x, phi_y, phi_z, r, t, beta, w, l1, l2, l3]``; a layer holds an (m, 10)
array plus an (m,) array of kind codes. Gradients use the same layout.

Conventions at non-smooth points: ``d rho / d z = 0`` at ``rho = 0``,
``d sqrt(q) / d q = 0`` at ``q = 0``, ``sign(0) = 0`` for ``|w - h|`` and the
derivative of ``max(h, 1e-3)`` is 1 only for ``h > 1e-3``. The exponent is capped
at 700 so scores stay strictly positive; past the cap all gradients are zero.
"""

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import _accel
from ._accel import njit, prange
from .errors import WrongKind
from .geometry import _radial_distance_nb, radial_distance, rotation_matrices


class GibKind(IntEnum):
    CYLINDER = 0
    HOLLOW_CYLINDER = 1
    CONE = 2
    HOLLOW_CONE = 3
    DISK = 4
    HOLLOW_DISK = 5
    ELLIPSOID = 6
    HOLLOW_ELLIPSOID = 7

    @property
    def label(self):
        return _LABELS[self]

    @classmethod
    def parse(cls, name):
        key = str(name).replace("_", "").replace("-", "").lower()
        for kind in cls:
            if kind.label.lower() == key:
                return kind
        raise ValueError(f"unknown kernel kind {name!r}")


_LABELS = {
    GibKind.CYLINDER: "Cylinder",
    GibKind.HOLLOW_CYLINDER: "HollowCylinder",
    GibKind.CONE: "Cone",
    GibKind.HOLLOW_CONE: "HollowCone",
    GibKind.DISK: "Disk",
    GibKind.HOLLOW_DISK: "HollowDisk",
    GibKind.ELLIPSOID: "Ellipsoid",
    GibKind.HOLLOW_ELLIPSOID: "HollowEllipsoid",
}

CYLINDER_FAMILY = (GibKind.CYLINDER, GibKind.HOLLOW_CYLINDER)

NPARAM = 10
PHI = slice(0, 3)
R_COL, T_COL, BETA_COL, W_COL = 3, 4, 5, 6
ELL = slice(7, 10)
PARAM_NAMES = ("phi_x", "phi_y", "phi_z", "r", "t", "beta", "w", "l1", "l2", "l3")

H_FLOOR = 1e-3
MIN_LENGTH = 1e-3
BETA_MIN, BETA_MAX = 1e-3, 0.5 - 1e-3
POS_FLOOR = 1e-6
E_MAX = 700.0

_K_CY, _K_HCY, _K_CN, _K_HCN, _K_DK, _K_HDK, _K_EL, _K_HEL = range(8)

# Which packed columns each kind reads.
USED = np.zeros((8, NPARAM), dtype=bool)
USED[:, PHI] = True
for _k in (_K_CY, _K_HCY, _K_CN, _K_HCN, _K_DK, _K_HDK, _K_HEL):
    USED[_k, R_COL] = True
for _k in (_K_HCY, _K_HCN, _K_HDK, _K_HEL):
    USED[_k, T_COL] = True
USED[[_K_CN, _K_HCN], BETA_COL] = True
USED[[_K_DK, _K_HDK], W_COL] = True
USED[[_K_EL, _K_HEL], ELL] = True


def positive(raw):
    """Softplus positivity map with a 1e-6 floor."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.logaddexp(0.0, raw) + POS_FLOOR


def positive_inverse(value):
    """Raw scale whose :func:`positive` image is ``value``."""
    return np.log(np.expm1(np.asarray(value, dtype=np.float64) - POS_FLOOR))


@dataclass
class GibParams:
    """One kernel instance.

    ``ell_scales`` are raw (pre-positivity) values; fields a kind does not use
    are ignored.
    """

    kind: GibKind
    angles: tuple = (0.0, 0.0, 0.0)
    r: float = 1.0
    t: float = 0.1
    beta: float = 0.25
    w: float = 0.0
    ell_scales: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.kind = GibKind(self.kind)
        self.angles = tuple(float(a) for a in self.angles)
        self.ell_scales = tuple(float(a) for a in self.ell_scales)

    def to_row(self):
        return np.array([*self.angles, self.r, self.t, self.beta, self.w, *self.ell_scales],
                        dtype=np.float64)

    @classmethod
    def from_row(cls, kind, row):
        row = np.asarray(row, dtype=np.float64)
        return cls(kind, tuple(row[PHI]), float(row[R_COL]), float(row[T_COL]),
                   float(row[BETA_COL]), float(row[W_COL]), tuple(row[ELL]))

    def projected(self):
        row = project_rows(np.array([int(self.kind)]), self.to_row()[None, :])[0]
        return GibParams.from_row(self.kind, row)


@dataclass
class GibGrad:
    d_r: float = 0.0
    d_t: float = 0.0
    d_beta: float = 0.0
    d_w: float = 0.0
    d_angles: tuple = field(default=(0.0, 0.0, 0.0))
    d_ell_scales: tuple = field(default=(0.0, 0.0, 0.0))

    @classmethod
    def from_row(cls, row):
        row = np.asarray(row, dtype=np.float64)
        return cls(float(row[R_COL]), float(row[T_COL]), float(row[BETA_COL]),
                   float(row[W_COL]), tuple(row[PHI]), tuple(row[ELL]))

    def to_row(self):
        return np.array([*self.d_angles, self.d_r, self.d_t, self.d_beta, self.d_w,
                         *self.d_ell_scales])


def project_rows(kinds, theta):
    """Clamp lengths and beta, wrap angles into (-pi, pi]; returns a new array."""
    from .geometry import wrap_angle

    theta = np.array(theta, dtype=np.float64, copy=True)
    theta[:, PHI] = wrap_angle(theta[:, PHI])
    theta[:, R_COL] = np.maximum(theta[:, R_COL], MIN_LENGTH)
    theta[:, T_COL] = np.maximum(theta[:, T_COL], MIN_LENGTH)
    theta[:, BETA_COL] = np.clip(theta[:, BETA_COL], BETA_MIN, BETA_MAX)
    return theta


def ellipsoid_precision(params):
    """``Lambda = R diag(pos(l)) R.T`` for an (hollow) ellipsoid kernel."""
    if params.kind not in (GibKind.ELLIPSOID, GibKind.HOLLOW_ELLIPSOID):
        raise WrongKind(f"{params.kind.label} has no precision matrix")
    R, _ = rotation_matrices(np.array(params.angles))
    lam = R[0] @ np.diag(positive(params.ell_scales)) @ R[0].T
    return 0.5 * (lam + lam.T)


# --------------------------------------------------------------------------
# numba scalar kernels
# --------------------------------------------------------------------------


@njit
def _softplus(x):
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@njit
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


NCONST = 7


@njit
def _kernel_consts_nb(kinds, theta):
    """Per-kernel values that depend on parameters only: pos(l1..l3), sigmoid(l1..l3), tan(pi*beta)."""
    m = kinds.shape[0]
    c = np.zeros((m, NCONST))
    for j in range(m):
        if kinds[j] == 6 or kinds[j] == 7:
            for k in range(3):
                c[j, k] = _softplus(theta[j, 7 + k]) + 1e-6
                c[j, 3 + k] = _sigmoid(theta[j, 7 + k])
        elif kinds[j] == 2 or kinds[j] == 3:
            c[j, 6] = np.tan(theta[j, 5] * np.pi)
    return c


@njit(inline="always")
def _exponent_nb(kind, th, cst, z1, z2, z3, want, g):
    """Exponent ``E``; with ``want`` fill ``g`` with dE/d(z1, z2, z3, r, t, beta, w, l1..l3).

    ``cst`` is the kernel's row of :func:`_kernel_consts_nb`.
    """
    if want:
        for c in range(10):
            g[c] = 0.0
    r = th[3]
    t = th[4]
    if kind == 6 or kind == 7:
        d0 = cst[0]
        d1 = cst[1]
        d2 = cst[2]
        q = d0 * z1 * z1 + d1 * z2 * z2 + d2 * z3 * z3
        if kind == 6:
            if want:
                g[0] = d0 * z1
                g[1] = d1 * z2
                g[2] = d2 * z3
                g[7] = 0.5 * z1 * z1 * cst[3]
                g[8] = 0.5 * z2 * z2 * cst[4]
                g[9] = 0.5 * z3 * z3 * cst[5]
            return 0.5 * q
        s = np.sqrt(q)
        u = s - r
        E = u * u / (2.0 * t * t)
        if want:
            dq = 0.0
            if s > 0.0:
                dq = (u / (t * t)) / (2.0 * s)
            g[0] = dq * 2.0 * d0 * z1
            g[1] = dq * 2.0 * d1 * z2
            g[2] = dq * 2.0 * d2 * z3
            g[7] = dq * z1 * z1 * cst[3]
            g[8] = dq * z2 * z2 * cst[4]
            g[9] = dq * z3 * z3 * cst[5]
            g[3] = -u / (t * t)
            g[4] = -u * u / (t * t * t)
        return E

    rho2 = z1 * z1 + z2 * z2
    rho = _radial_distance_nb(z1, z2)
    ux = 0.0
    uy = 0.0
    if rho > 0.0:
        ux = z1 / rho
        uy = z2 / rho

    if kind == 0:
        if want:
            g[0] = z1 / (r * r)
            g[1] = z2 / (r * r)
            g[3] = -rho2 / (r * r * r)
        return rho2 / (2.0 * r * r)
    if kind == 1:
        u = rho - r
        if want:
            de = u / (t * t)
            g[0] = de * ux
            g[1] = de * uy
            g[3] = -de
            g[4] = -u * u / (t * t * t)
        return u * u / (2.0 * t * t)
    if kind == 2 or kind == 3:
        tb = cst[6]
        above = z3 > 1e-3
        he = z3 if above else 1e-3
        sig = r * he * tb
        if kind == 2:
            E = rho2 / (2.0 * sig * sig)
            if want:
                dsig = -rho2 / (sig * sig * sig)
                g[0] = z1 / (sig * sig)
                g[1] = z2 / (sig * sig)
                if above:
                    g[2] = dsig * r * tb
                g[3] = dsig * he * tb
                g[5] = dsig * r * he * np.pi * (1.0 + tb * tb)
            return E
        u = rho - sig
        E = u * u / (2.0 * t * t)
        if want:
            de = u / (t * t)
            dsig = -de
            g[0] = de * ux
            g[1] = de * uy
            if above:
                g[2] = dsig * r * tb
            g[3] = dsig * he * tb
            g[4] = -u * u / (t * t * t)
            g[5] = dsig * r * he * np.pi * (1.0 + tb * tb)
        return E
    # disk family
    w = th[6]
    diff = w - z3
    a = abs(diff)
    sg = 0.0
    if diff > 0.0:
        sg = 1.0
    elif diff < 0.0:
        sg = -1.0
    if kind == 4:
        B = rho2 / (2.0 * r * r)
        if want:
            g[0] = a * z1 / (r * r)
            g[1] = a * z2 / (r * r)
            g[2] = -B * sg
            g[3] = -rho2 * a / (r * r * r)
            g[6] = B * sg
        return B * a
    u = rho - r
    B = u * u / (2.0 * t * t)
    if want:
        de = a * u / (t * t)
        g[0] = de * ux
        g[1] = de * uy
        g[2] = -B * sg
        g[3] = -de
        g[4] = -a * u * u / (t * t * t)
        g[6] = B * sg
    return B * a


@njit(inline="always")
def _psi_nb(kind, th, cst, z1, z2, z3, g):
    # g is unused scratch; passing it avoids an allocation per call
    E = _exponent_nb(kind, th, cst, z1, z2, z3, False, g)
    if E > 700.0:
        E = 700.0
    return np.exp(-E)


@njit(inline="always")
def _psi_grad_nb(kind, th, cst, R, dR, d0, d1, d2, g):
    """Score of raw offset ``d`` and its gradient w.r.t. the packed row (written to ``g``)."""
    z1 = R[0, 0] * d0 + R[1, 0] * d1 + R[2, 0] * d2
    z2 = R[0, 1] * d0 + R[1, 1] * d1 + R[2, 1] * d2
    z3 = R[0, 2] * d0 + R[1, 2] * d1 + R[2, 2] * d2
    E = _exponent_nb(kind, th, cst, z1, z2, z3, True, g)
    if E > 700.0:
        for c in range(10):
            g[c] = 0.0
        return np.exp(-700.0)
    psi = np.exp(-E)
    e1 = g[0]
    e2 = g[1]
    e3 = g[2]
    for k in range(3):
        a1 = dR[k, 0, 0] * d0 + dR[k, 1, 0] * d1 + dR[k, 2, 0] * d2
        a2 = dR[k, 0, 1] * d0 + dR[k, 1, 1] * d1 + dR[k, 2, 1] * d2
        a3 = dR[k, 0, 2] * d0 + dR[k, 1, 2] * d1 + dR[k, 2, 2] * d2
        g[k] = -psi * (e1 * a1 + e2 * a2 + e3 * a3)
    for c in range(3, 10):
        g[c] = -psi * g[c]
    return psi


@njit(parallel=True)
def _rotate_nb(offsets, R):
    P = offsets.shape[0]
    m = R.shape[0]
    Z = np.empty((P, m, 3))
    for p in prange(P):
        d0 = offsets[p, 0]
        d1 = offsets[p, 1]
        d2 = offsets[p, 2]
        for j in range(m):
            for c in range(3):
                Z[p, j, c] = R[j, 0, c] * d0 + R[j, 1, c] * d1 + R[j, 2, c] * d2
    return Z


@njit(parallel=True)
def _psi_canonical_nb(kinds, theta, Z):
    P = Z.shape[0]
    m = Z.shape[1]
    out = np.empty((P, m))
    cst = _kernel_consts_nb(kinds, theta)
    scratch = np.empty(0)
    for p in prange(P):
        for j in range(m):
            out[p, j] = _psi_nb(kinds[j], theta[j], cst[j], Z[p, j, 0], Z[p, j, 1], Z[p, j, 2],
                                scratch)
    return out


@njit
def _psi_grad_many_nb(kind, th, R, dR, offsets):
    P = offsets.shape[0]
    psi = np.empty(P)
    grad = np.empty((P, 10))
    cst = _kernel_consts_nb(np.array([kind]), th.reshape(1, -1))[0]
    for p in range(P):
        psi[p] = _psi_grad_nb(kind, th, cst, R, dR, offsets[p, 0], offsets[p, 1], offsets[p, 2],
                              grad[p])
    return psi, grad


# --------------------------------------------------------------------------
# numpy fallbacks
# --------------------------------------------------------------------------


def _softplus_np(x):
    return np.logaddexp(0.0, x)


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _exponent_np(kind, th, Z, want):
    """Vectorised exponent over canonical offsets ``Z`` (P, 3)."""
    z1, z2, z3 = Z[:, 0], Z[:, 1], Z[:, 2]
    P = Z.shape[0]
    g = np.zeros((P, NPARAM)) if want else None
    r, t = th[R_COL], th[T_COL]
    if kind in (_K_EL, _K_HEL):
        D = _softplus_np(th[ELL]) + POS_FLOOR
        q = D[0] * z1 * z1 + D[1] * z2 * z2 + D[2] * z3 * z3
        sgm = _sigmoid_np(th[ELL])
        if kind == _K_EL:
            if want:
                g[:, 0:3] = D * Z
                g[:, 7:10] = 0.5 * Z * Z * sgm
            return 0.5 * q, g
        s = np.sqrt(q)
        u = s - r
        E = u * u / (2.0 * t * t)
        if want:
            with np.errstate(divide="ignore", invalid="ignore"):
                dq = np.where(s > 0, (u / (t * t)) / (2.0 * s), 0.0)
            g[:, 0:3] = dq[:, None] * 2.0 * D * Z
            g[:, 7:10] = dq[:, None] * Z * Z * sgm
            g[:, 3] = -u / (t * t)
            g[:, 4] = -u * u / (t * t * t)
        return E, g

    rho2 = z1 * z1 + z2 * z2
    rho = radial_distance(z1, z2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = np.where(rho > 0, z1 / rho, 0.0)
        uy = np.where(rho > 0, z2 / rho, 0.0)

    if kind == _K_CY:
        if want:
            g[:, 0] = z1 / (r * r)
            g[:, 1] = z2 / (r * r)
            g[:, 3] = -rho2 / (r * r * r)
        return rho2 / (2.0 * r * r), g
    if kind == _K_HCY:
        u = rho - r
        if want:
            de = u / (t * t)
            g[:, 0] = de * ux
            g[:, 1] = de * uy
            g[:, 3] = -de
            g[:, 4] = -u * u / (t * t * t)
        return u * u / (2.0 * t * t), g
    if kind in (_K_CN, _K_HCN):
        beta = th[BETA_COL]
        tb = np.tan(beta * np.pi)
        above = z3 > H_FLOOR
        he = np.where(above, z3, H_FLOOR)
        sig = r * he * tb
        if kind == _K_CN:
            E = rho2 / (2.0 * sig * sig)
            if want:
                dsig = -rho2 / (sig * sig * sig)
                g[:, 0] = z1 / (sig * sig)
                g[:, 1] = z2 / (sig * sig)
                g[:, 2] = np.where(above, dsig * r * tb, 0.0)
                g[:, 3] = dsig * he * tb
                g[:, 5] = dsig * r * he * np.pi * (1.0 + tb * tb)
            return E, g
        u = rho - sig
        E = u * u / (2.0 * t * t)
        if want:
            de = u / (t * t)
            dsig = -de
            g[:, 0] = de * ux
            g[:, 1] = de * uy
            g[:, 2] = np.where(above, dsig * r * tb, 0.0)
            g[:, 3] = dsig * he * tb
            g[:, 4] = -u * u / (t * t * t)
            g[:, 5] = dsig * r * he * np.pi * (1.0 + tb * tb)
        return E, g
    diff = th[W_COL] - z3
    a = np.abs(diff)
    sg = np.sign(diff)
    if kind == _K_DK:
        B = rho2 / (2.0 * r * r)
        if want:
            g[:, 0] = a * z1 / (r * r)
            g[:, 1] = a * z2 / (r * r)
            g[:, 2] = -B * sg
            g[:, 3] = -rho2 * a / (r * r * r)
            g[:, 6] = B * sg
        return B * a, g
    u = rho - r
    B = u * u / (2.0 * t * t)
    if want:
        de = a * u / (t * t)
        g[:, 0] = de * ux
        g[:, 1] = de * uy
        g[:, 2] = -B * sg
        g[:, 3] = -de
        g[:, 4] = -a * u * u / (t * t * t)
        g[:, 6] = B * sg
    return B * a, g


def _psi_np(kind, th, Z):
    E, _ = _exponent_np(kind, th, Z, False)
    return np.exp(-np.minimum(E, E_MAX))


def _psi_grad_many_np(kind, th, R, dR, offsets):
    Z = offsets @ R
    E, g = _exponent_np(kind, th, Z, True)
    capped = E > E_MAX
    psi = np.exp(-np.minimum(E, E_MAX))
    ez = g[:, 0:3].copy()
    for k in range(3):
        g[:, k] = -psi * np.einsum("pl,pl->p", ez, offsets @ dR[k])
    g[:, 3:] *= -psi[:, None]
    g[capped] = 0.0
    return psi, g


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def rotate_offsets(offsets, R):
    """Canonical offsets ``Z[p, j] = R[j].T @ offsets[p]`` with shape (P, m, 3)."""
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    if _accel.use_numba():
        return _rotate_nb(offsets, np.ascontiguousarray(R))
    return np.einsum("pk,jkl->pjl", offsets, R)


def psi_canonical(kinds, theta, Z):
    """Scores (P, m) of canonical offsets ``Z`` (P, m, 3) under each kernel."""
    if _accel.use_numba():
        return _psi_canonical_nb(np.ascontiguousarray(kinds, dtype=np.int64),
                                 np.ascontiguousarray(theta), np.ascontiguousarray(Z))
    out = np.empty(Z.shape[:2])
    for j, kind in enumerate(kinds):
        out[:, j] = _psi_np(int(kind), theta[j], Z[:, j, :])
    return out


def psi_grad_many(kind, theta_row, R, dR, offsets):
    """Scores (P,) and packed gradients (P, 10) of one kernel at raw offsets (P, 3)."""
    offsets = np.ascontiguousarray(np.asarray(offsets, dtype=np.float64).reshape(-1, 3))
    if _accel.use_numba():
        return _psi_grad_many_nb(int(kind), np.ascontiguousarray(theta_row, dtype=np.float64),
                                 R, dR, offsets)
    return _psi_grad_many_np(int(kind), np.asarray(theta_row, dtype=np.float64), R, dR,
                             offsets)


def eval_gibs(kinds, theta, offsets):
    """Scores (P, m) of raw offsets (P, 3) under every packed kernel."""
    R, _ = rotation_matrices(theta[:, PHI])
    Z = rotate_offsets(np.asarray(offsets, dtype=np.float64).reshape(-1, 3), R)
    return psi_canonical(kinds, theta, Z)


def eval_gib(params, offset):
    """Alignment score in (0, 1] of raw offset ``x - q`` under ``params``."""
    theta = params.to_row()[None, :]
    return float(eval_gibs(np.array([int(params.kind)]), theta, offset)[0, 0])


def eval_gib_grad(params, offset):
    """Score and exact gradient w.r.t. every parameter of ``params``."""
    row = params.to_row()
    R, dR = rotation_matrices(row[PHI])
    psi, g = psi_grad_many(int(params.kind), row, R[0], dR[0], offset)
    return float(psi[0]), GibGrad.from_row(g[0])
