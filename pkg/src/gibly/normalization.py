"""Monte-Carlo kernel normalisation.

A kernel's mean response over the neighbourhood ball is estimated from a fixed
set of uniform samples and subtracted from its score, so neighbours aligned
better than the ball average score positive and the rest negative.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidCount, NonPositiveRadius
from .geometry import rotation_matrices
from .kernels import PHI, GibGrad, eval_gibs, psi_grad_many

DEFAULT_SAMPLES = 256


@dataclass(frozen=True)
class McSampleSet:
    samples: np.ndarray
    r_ball: float
    seed: int

    def __len__(self):
        return self.samples.shape[0]


def make_mc_samples(M, r_ball, seed):
    """``M`` points uniform in the ball of radius ``r_ball``, by rejection from the cube."""
    M = int(M)
    if M < 1:
        raise InvalidCount(f"M must be >= 1, got {M}")
    r_ball = float(r_ball)
    if not r_ball > 0:
        raise NonPositiveRadius(f"r_ball must be positive, got {r_ball}")
    rng = np.random.default_rng(seed)
    kept = []
    have = 0
    batch = max(2 * M, 64)
    while have < M:
        cube = rng.uniform(-r_ball, r_ball, size=(batch, 3))
        inside = cube[np.einsum("ij,ij->i", cube, cube) <= r_ball * r_ball]
        kept.append(inside)
        have += len(inside)
    samples = np.concatenate(kept)[:M]
    samples.setflags(write=False)
    return McSampleSet(samples, r_ball, seed)


def scale_seed(global_seed, scale):
    """Seed for the sample set of one neighbourhood scale."""
    state = np.random.SeedSequence([int(global_seed), int(scale)]).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def omega(params, mc):
    """Sum of the kernel's scores over the sample set."""
    theta = params.to_row()[None, :]
    return float(eval_gibs(np.array([int(params.kind)]), theta, mc.samples)[:, 0].sum())


def normalized_eval(params, offset, mc):
    """Score minus the sample-set average score."""
    theta = params.to_row()[None, :]
    kinds = np.array([int(params.kind)])
    psi = eval_gibs(kinds, theta, offset)[0, 0]
    return float(psi - eval_gibs(kinds, theta, mc.samples)[:, 0].sum() / len(mc))


def mc_means(kinds, theta, mc, R=None, dR=None, want_grad=False):
    """Per-kernel mean score (m,) over ``mc`` and, optionally, mean gradient (m, 10)."""
    if not want_grad:
        return eval_gibs(kinds, theta, mc.samples).mean(axis=0), None
    if R is None:
        R, dR = rotation_matrices(theta[:, PHI])
    m = len(kinds)
    means = np.empty(m)
    grads = np.empty((m, theta.shape[1]))
    for j in range(m):
        psi, g = psi_grad_many(kinds[j], theta[j], R[j], dR[j], mc.samples)
        means[j] = psi.mean()
        grads[j] = g.mean(axis=0)
    return means, grads


def normalized_eval_grad(params, offset, mc):
    """Normalised score and its gradient; the gradient flows through the sample mean too."""
    row = params.to_row()
    R, dR = rotation_matrices(row[PHI])
    psi, g = psi_grad_many(int(params.kind), row, R[0], dR[0], offset)
    mean_psi, mean_g = mc_means(np.array([int(params.kind)]), row[None, :], mc, R, dR,
                                want_grad=True)
    return float(psi[0] - mean_psi[0]), GibGrad.from_row(g[0] - mean_g[0])
