"""The full layer: multi-scale kernel responses, composites, concatenation, projection.

For query point ``i``, kernel ``j`` and scale ``s`` the layer computes::

    g[i, s, j] = mean_{x in N_s(i)} psi_j(x - p_i) - mean_{y in MC_s} psi_j(y)
    c[i, s]    = W @ g[i, s]
    pre[i]     = concat(features[i], c[i, 0], ..., c[i, S-1])
    out[i]     = pre[i] @ projection + bias

Every point is a query and belongs to its own neighbourhood, so no mean is
ever taken over an empty set. The forward pass is organised in named phases
(see :data:`PHASES`) so the benchmark can time it without a separate code path.
"""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from ._accel import njit, prange
from .composite import CompositeWeights, RegularizerConfig, init_weights, regularizer
from .errors import IndexCloudMismatch, ShapeMismatch, StaleCache
from .geometry import rotation_matrices
from .kernels import (
    BETA_COL, ELL, NPARAM, PHI, R_COL, T_COL, USED, W_COL, GibKind, GibParams,
    E_MAX, _exponent_nb, _kernel_consts_nb, _psi_grad_many_np, _psi_nb, positive_inverse, project_rows, psi_canonical,
    rotate_offsets,
)
from .neighborhood import PointCloud, ScaleSchedule, build_index, neighbor_table
from .normalization import DEFAULT_SAMPLES, make_mc_samples, mc_means, scale_seed

PHASES = ("neighborhood", "rotation", "normalization", "gib", "composite")

# Pairs per chunk of the forward pass; bounds the (pairs, kernels, 3) buffer.
PAIR_BUDGET = 1 << 17


@dataclass(frozen=True)
class GiblyConfig:
    schedule: ScaleSchedule = field(default_factory=ScaleSchedule)
    gibs_per_kind: int = 2
    num_composites: int = 16
    mc_samples: int = DEFAULT_SAMPLES
    projection_dim: int = 32
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    global_seed: int = 0
    max_neighbors: int = None
    cell_size: float = None

    def __post_init__(self):
        for name in ("gibs_per_kind", "num_composites", "mc_samples", "projection_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_neighbors is not None and int(self.max_neighbors) < 1:
            raise ValueError("max_neighbors must be >= 1 when set")

    @property
    def num_gibs(self):
        return 8 * self.gibs_per_kind

    @property
    def radii(self):
        return self.schedule.radii

    def index_cell_size(self):
        return self.cell_size if self.cell_size else max(self.radii)


class _NullTimer:
    def phase(self, name):
        return contextlib.nullcontext()


_NULL_TIMER = _NullTimer()


@dataclass
class ForwardCache:
    cloud: PointCloud
    table: object
    g: np.ndarray
    pre: np.ndarray
    snapshot: tuple


@dataclass
class ForwardResult:
    output: np.ndarray
    pre: np.ndarray
    g: np.ndarray
    cache: ForwardCache

    @property
    def composites(self):
        """Composite block of ``pre`` reshaped to (N, S, n)."""
        return self.cache.g @ self.cache.snapshot[1].T


@dataclass
class LayerGrads:
    theta: np.ndarray
    W: np.ndarray
    projection: np.ndarray
    bias: np.ndarray

    def as_dict(self):
        return {"theta": self.theta, "W": self.W, "projection": self.projection,
                "bias": self.bias}


def _init_theta(kinds, base_radius, rng):
    m = len(kinds)
    theta = np.zeros((m, NPARAM))
    theta[:, PHI] = np.pi - rng.uniform(0.0, 2.0 * np.pi, size=(m, 3))
    theta[:, R_COL] = rng.uniform(0.1, 1.0, m) * base_radius
    theta[:, T_COL] = rng.uniform(0.1, 1.0, m) * base_radius
    theta[:, W_COL] = rng.uniform(0.1, 1.0, m) * base_radius
    theta[:, BETA_COL] = rng.uniform(0.05, 0.45, m)
    theta[:, ELL] = positive_inverse(rng.uniform(0.5, 2.0, (m, 3)))
    return theta


class GiblyLayer:
    """Parameter container plus forward/backward evaluation over a point cloud.

    Parameters
    ----------
    `config` - GiblyConfig
    `in_features` - int
        Width C_in of the per-point input features concatenated in front of the
        composite block.
    """

    def __init__(self, config=None, in_features=0):
        self.config = config or GiblyConfig()
        cfg = self.config
        self.in_features = int(in_features)
        seq = np.random.SeedSequence(cfg.global_seed)
        s_gib, s_w, s_proj = seq.spawn(3)
        self.kinds = np.repeat(np.arange(8, dtype=np.int64), cfg.gibs_per_kind)
        self.theta = _init_theta(self.kinds, cfg.schedule.base_radius,
                                 np.random.default_rng(s_gib))
        self.W = init_weights(cfg.num_composites, cfg.num_gibs, s_w).W
        fan_in = self.pre_width
        bound = 1.0 / np.sqrt(fan_in)
        self.projection = np.random.default_rng(s_proj).uniform(
            -bound, bound, size=(fan_in, cfg.projection_dim))
        self.bias = np.zeros(cfg.projection_dim)
        self.mc_sets = [make_mc_samples(cfg.mc_samples, r, scale_seed(cfg.global_seed, s))
                        for s, r in enumerate(cfg.radii)]
        self.project_parameters()

    # -- parameter access ----------------------------------------------------

    @property
    def num_scales(self):
        return self.config.schedule.num_scales

    @property
    def pre_width(self):
        return self.in_features + self.config.num_composites * self.num_scales

    @property
    def gib_params(self):
        return [GibParams.from_row(GibKind(k), row) for k, row in zip(self.kinds, self.theta)]

    @property
    def weights(self):
        return CompositeWeights(self.W)

    def parameters(self):
        """Learnable arrays by name; optimisers update these in place."""
        return {"theta": self.theta, "W": self.W, "projection": self.projection,
                "bias": self.bias}

    def set_gib(self, j, params):
        self.kinds[j] = int(params.kind)
        self.theta[j] = params.to_row()

    def project_parameters(self):
        """Clamp r, t, beta and wrap angles, in place; idempotent."""
        self.theta[...] = project_rows(self.kinds, self.theta)

    def _snapshot(self):
        return (self.theta.copy(), self.W.copy(), self.projection.copy(), self.bias.copy(),
                self.kinds.copy())

    # -- forward -------------------------------------------------------------

    def forward(self, cloud, index=None, timer=None):
        timer = timer or _NULL_TIMER
        cfg = self.config
        if cloud.num_features != self.in_features:
            raise ShapeMismatch(
                f"layer expects {self.in_features} input features, cloud has {cloud.num_features}")
        N = len(cloud)
        S = self.num_scales

        with timer.phase("neighborhood"):
            if index is None:
                index = build_index(cloud, cfg.index_cell_size())
            elif index.source is not cloud and not np.array_equal(index.coords, cloud.coords):
                raise IndexCloudMismatch("index was built over a different cloud")
            table = neighbor_table(index, cloud.coords, cfg.radii, cfg.max_neighbors)

        with timer.phase("rotation"):
            R, _ = rotation_matrices(self.theta[:, PHI])

        with timer.phase("normalization"):
            mc_mean = np.stack([mc_means(self.kinds, self.theta, mc)[0] for mc in self.mc_sets])

        # applying R to each neighbour offset is part of evaluating the kernel
        with timer.phase("gib"):
            sums = _neighborhood_sums(cloud.coords, table, self.kinds, self.theta, R, S)

        with timer.phase("normalization"):
            g = sums / table.counts[:, :, None] - mc_mean[None, :, :]

        with timer.phase("composite"):
            comp = g @ self.W.T

        pre = np.concatenate([cloud.feature_matrix(), comp.reshape(N, -1)], axis=1)
        out = pre @ self.projection + self.bias
        cache = ForwardCache(cloud, table, g, pre, self._snapshot())
        return ForwardResult(out, pre, g, cache)

    # -- backward ------------------------------------------------------------

    def backward(self, cache, upstream):
        """Gradients of ``sum(upstream * output)`` plus the W regulariser."""
        if cache is None:
            raise StaleCache("no forward cache")
        snap = self._snapshot()
        if any(not np.array_equal(a, b) for a, b in zip(snap, cache.snapshot)):
            raise StaleCache("parameters changed since the forward pass")
        G = np.asarray(upstream, dtype=np.float64)
        N = len(cache.cloud)
        S = self.num_scales
        n = self.config.num_composites
        if G.shape != (N, self.config.projection_dim):
            raise ShapeMismatch(f"upstream must be {(N, self.config.projection_dim)}, got {G.shape}")

        d_proj = cache.pre.T @ G
        d_bias = G.sum(axis=0)
        d_pre = G @ self.projection.T
        dC = d_pre[:, self.in_features:].reshape(N, S, n)
        _, reg_grad = regularizer(self.W, self.config.reg)
        d_W = np.einsum("isn,ism->nm", dC, cache.g) + reg_grad
        dg = dC @ self.W

        table = cache.table
        R, dR = rotation_matrices(self.theta[:, PHI])
        # weight of a pair at level L: sum over scales s >= L of dg / |N_s|
        A = dg / table.counts[:, :, None]
        A_cum = np.ascontiguousarray(np.flip(np.cumsum(np.flip(A, axis=1), axis=1), axis=1))
        part = _pair_grads(cache.cloud.coords, table, self.kinds, self.theta, R, dR, A_cum)
        d_theta = part.sum(axis=0)
        totals = dg.sum(axis=0)
        for s, mc in enumerate(self.mc_sets):
            _, mc_grad = mc_means(self.kinds, self.theta, mc, R, dR, want_grad=True)
            d_theta -= totals[s][:, None] * mc_grad
        d_theta *= USED[self.kinds]
        return LayerGrads(d_theta, d_W, d_proj, d_bias)


def _chunks(ptr, budget):
    """Query ranges whose pair counts stay near ``budget`` (at least one query each)."""
    nq = ptr.shape[0] - 1
    out = []
    q0 = 0
    while q0 < nq:
        q1 = int(np.searchsorted(ptr, ptr[q0] + budget, side="right")) - 1
        q1 = min(max(q1, q0 + 1), nq)
        out.append((q0, q1))
        q0 = q1
    return out


def _aggregate(psi, level, ptr, S):
    """Per-query sums of scores over each nested scale, shape (nq, S, m)."""
    nq = ptr.shape[0] - 1
    m = psi.shape[1]
    key = np.repeat(np.arange(nq), np.diff(ptr)) * S + level
    out = np.empty((nq * S, m))
    for j in range(m):
        out[:, j] = np.bincount(key, weights=psi[:, j], minlength=nq * S)
    return np.cumsum(out.reshape(nq, S, m), axis=1)


@njit(parallel=True)
def _neighborhood_sums_nb(coords, ptr, idx, level, kinds, theta, R, S):
    nq = ptr.shape[0] - 1
    m = kinds.shape[0]
    out = np.zeros((nq, S, m))
    cst = _kernel_consts_nb(kinds, theta)
    scratch = np.empty(0)
    for q in prange(nq):
        for p in range(ptr[q], ptr[q + 1]):
            x = idx[p]
            d0 = coords[x, 0] - coords[q, 0]
            d1 = coords[x, 1] - coords[q, 1]
            d2 = coords[x, 2] - coords[q, 2]
            lv = level[p]
            for j in range(m):
                Rj = R[j]
                z1 = Rj[0, 0] * d0 + Rj[1, 0] * d1 + Rj[2, 0] * d2
                z2 = Rj[0, 1] * d0 + Rj[1, 1] * d1 + Rj[2, 1] * d2
                z3 = Rj[0, 2] * d0 + Rj[1, 2] * d1 + Rj[2, 2] * d2
                out[q, lv, j] += _psi_nb(kinds[j], theta[j], cst[j], z1, z2, z3, scratch)
        for s in range(1, S):
            for j in range(m):
                out[q, s, j] += out[q, s - 1, j]
    return out


def _neighborhood_sums(coords, table, kinds, theta, R, S):
    """Per-query sums of kernel scores over each nested scale, shape (N, S, m)."""
    if _accel.use_numba():
        return _neighborhood_sums_nb(coords, table.ptr, table.idx, table.level, kinds, theta,
                                     np.ascontiguousarray(R), S)
    sums = np.empty((table.num_queries, S, len(kinds)))
    for q0, q1 in _chunks(table.ptr, PAIR_BUDGET):
        p0, p1 = table.ptr[q0], table.ptr[q1]
        qp = np.repeat(np.arange(q0, q1), np.diff(table.ptr[q0:q1 + 1]))
        Z = rotate_offsets(coords[table.idx[p0:p1]] - coords[qp], R)
        psi = psi_canonical(kinds, theta, Z)
        sums[q0:q1] = _aggregate(psi, table.level[p0:p1], table.ptr[q0:q1 + 1] - p0, S)
    return sums


@njit(parallel=True)
def _pair_grads_nb(coords, ptr, idx, level, kinds, theta, R, dR, A_cum):
    nq = ptr.shape[0] - 1
    m = kinds.shape[0]
    part = np.zeros((nq, m, 10))
    cst = _kernel_consts_nb(kinds, theta)
    for q in prange(nq):
        g = np.empty(10)
        # angle gradients are contracted once per query: dpsi/dphi_k = sum dR[k] * M
        # with M = sum over pairs of -a * psi * d e^T, e = dE/dz
        M = np.zeros((m, 3, 3))
        for p in range(ptr[q], ptr[q + 1]):
            x = idx[p]
            d0 = coords[x, 0] - coords[q, 0]
            d1 = coords[x, 1] - coords[q, 1]
            d2 = coords[x, 2] - coords[q, 2]
            lv = level[p]
            for j in range(m):
                a = A_cum[q, lv, j]
                if a == 0.0:
                    continue
                Rj = R[j]
                z1 = Rj[0, 0] * d0 + Rj[1, 0] * d1 + Rj[2, 0] * d2
                z2 = Rj[0, 1] * d0 + Rj[1, 1] * d1 + Rj[2, 1] * d2
                z3 = Rj[0, 2] * d0 + Rj[1, 2] * d1 + Rj[2, 2] * d2
                E = _exponent_nb(kinds[j], theta[j], cst[j], z1, z2, z3, True, g)
                if E > E_MAX:
                    continue
                f = -a * np.exp(-E)
                fe0 = f * g[0]
                fe1 = f * g[1]
                fe2 = f * g[2]
                M[j, 0, 0] += d0 * fe0
                M[j, 0, 1] += d0 * fe1
                M[j, 0, 2] += d0 * fe2
                M[j, 1, 0] += d1 * fe0
                M[j, 1, 1] += d1 * fe1
                M[j, 1, 2] += d1 * fe2
                M[j, 2, 0] += d2 * fe0
                M[j, 2, 1] += d2 * fe1
                M[j, 2, 2] += d2 * fe2
                for c in range(3, 10):
                    part[q, j, c] += f * g[c]
        for j in range(m):
            for k in range(3):
                acc = 0.0
                for r in range(3):
                    for c in range(3):
                        acc += dR[j, k, r, c] * M[j, r, c]
                part[q, j, k] = acc
    return part


def _pair_grads(coords, table, kinds, theta, R, dR, A_cum):
    """Per-query partial gradients (N, m, 10); summed afterwards in ascending order."""
    if _accel.use_numba():
        return _pair_grads_nb(coords, table.ptr, table.idx, table.level, kinds, theta,
                              np.ascontiguousarray(R), np.ascontiguousarray(dR), A_cum)
    nq = table.num_queries
    m = len(kinds)
    part = np.zeros((nq, m, NPARAM))
    for q0, q1 in _chunks(table.ptr, PAIR_BUDGET):
        p0, p1 = table.ptr[q0], table.ptr[q1]
        qp = np.repeat(np.arange(q0, q1), np.diff(table.ptr[q0:q1 + 1]))
        offsets = coords[table.idx[p0:p1]] - coords[qp]
        lv = table.level[p0:p1].astype(np.int64)
        for j in range(m):
            _, g = _psi_grad_many_np(int(kinds[j]), theta[j], R[j], dR[j], offsets)
            g *= A_cum[qp, lv, j][:, None]
            for c in range(NPARAM):
                part[q0:q1, j, c] = np.bincount(qp - q0, weights=g[:, c], minlength=q1 - q0)
    return part
