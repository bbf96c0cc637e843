"""Blocked Gibbs sampler over (gamma, beta, delta2, Z).

One iteration updates, in order:

1. ``gamma`` by single-site Metropolis flips over a random permutation of
   the instances, targeting ``p(gamma | delta2, Z)`` with ``beta`` integrated
   out;
2. ``beta`` from its Gaussian full conditional;
3. ``delta2`` from its inverse-gamma full conditional;
4. ``Z`` group by group: a random-walk Metropolis step with proposal scale
   ``2.4 / sqrt(n_j)`` for soft groups, exact truncated-normal draws for
   groups with ``m_j`` in {0, 1}.

Random numbers come from a single PCG64 stream per chain, consumed in that
order: per gamma sweep a permutation then ``N`` uniforms; ``K`` normals for
``beta``; one gamma variate for ``delta2``; per soft group ``n_j`` normals
then one uniform; per hard group the truncated-normal draws.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numba
import numpy as np

from .model import (
    Dataset,
    Group,
    Hyperparams,
    ModelState,
    PosteriorSample,
    lambda_of,
    log_m_likelihood,
)
from .numerics import (
    GramMatrix,
    SingularSystemError,
    _restricted_quad,
    gram,
    restricted_solve,
    sample_inverse_gamma,
    sample_truncated_normal,
)

__all__ = [
    "ChainConfig",
    "ChainReport",
    "ChainError",
    "init_state",
    "sample_gamma",
    "sample_beta",
    "sample_delta2",
    "delta2_posterior_params",
    "sample_z_group",
    "sample_z_group_hard",
    "proposal_scale",
    "run_chain",
    "chain_rng",
]


class ChainError(FloatingPointError):
    """The chain produced a non-finite state."""


@dataclass(frozen=True)
class ChainConfig:
    burn_in: int = 1000
    n_samples: int = 1000
    thin: int = 1
    seed: int = 0
    gamma_sweeps_per_iter: int = 1
    z_steps_per_iter: int = 1
    record_delta2: bool = False

    def __post_init__(self):
        for name in ("burn_in", "n_samples", "seed"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
        for name in ("thin", "gamma_sweeps_per_iter", "z_steps_per_iter"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {v}")
        if self.seed >= 2**64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def n_iterations(self) -> int:
        return self.burn_in + self.n_samples * self.thin


@dataclass
class ChainReport:
    """Diagnostics of one chain.

    Hard groups are updated by exact draws, which count as accepted.
    """

    z_accepted: list[int]
    z_proposed: list[int]
    gamma_accepted: int = 0
    gamma_proposed: int = 0
    gamma_singular: int = 0
    beta_singular: int = 0
    active_kernel_trace: list[int] = field(default_factory=list)
    delta2_trace: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    seed: int = 0
    chain: int = 0

    @property
    def z_acceptance_rate(self) -> list[float]:
        return [a / p if p else 0.0 for a, p in zip(self.z_accepted, self.z_proposed)]

    @property
    def gamma_flip_acceptance(self) -> float:
        return self.gamma_accepted / self.gamma_proposed if self.gamma_proposed else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["z_acceptance_rate"] = self.z_acceptance_rate
        d["gamma_flip_acceptance"] = self.gamma_flip_acceptance
        return d


def chain_rng(seed: int, chain: int = 0) -> np.random.Generator:
    """Generator for chain ``chain`` of a run seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(chain,))))


def proposal_scale(n_group: int) -> float:
    """Random-walk standard deviation ``2.4 / sqrt(n)`` for a group of size n."""
    return 2.4 / math.sqrt(n_group)


def _active_is_regular(psi: GramMatrix, active: np.ndarray) -> bool:
    try:
        restricted_solve(psi, _mask(psi.n, active), np.zeros(psi.n))
    except SingularSystemError:
        return False
    return True


def _mask(n: int, active) -> np.ndarray:
    g = np.zeros(n, dtype=bool)
    g[np.asarray(active, dtype=int)] = True
    return g


def init_state(dataset: Dataset, hyper: Hyperparams, rng: np.random.Generator,
               psi: Optional[GramMatrix] = None) -> ModelState:
    """Draw a starting state.

    Each kernel is active with probability ``a / (a + b)`` (one redraw if
    none is), ``delta2`` comes from its prior, and in every group the first
    ``ceil(m_j n_j)`` instances of a random permutation get positive
    truncated-normal ``z`` and the rest negative ones.
    """
    n = dataset.n
    if n < 1:
        raise ValueError("empty dataset")
    p_on = hyper.a / (hyper.a + hyper.b)
    gamma = rng.random(n) < p_on
    if not gamma.any():
        gamma = rng.random(n) < p_on
    if psi is not None and gamma.any() and not _active_is_regular(psi, np.flatnonzero(gamma)):
        # duplicated points: keep a maximal regular subset, in index order
        keep: list[int] = []
        for i in np.flatnonzero(gamma):
            if _active_is_regular(psi, np.array(keep + [i])):
                keep.append(int(i))
        gamma = _mask(n, keep)
    delta2 = sample_inverse_gamma(hyper.mu / 2.0, hyper.nu / 2.0, rng)
    z = np.empty(n)
    for g in dataset.groups:
        members = np.asarray(g.members)
        n_pos = int(math.ceil(g.m * g.size - 1e-9))
        order = rng.permutation(g.size)
        pos, neg = members[order[:n_pos]], members[order[n_pos:]]
        z[pos] = sample_truncated_normal(np.zeros(pos.size), "positive", rng)
        z[neg] = sample_truncated_normal(np.zeros(neg.size), "negative", rng)
    return ModelState(gamma=gamma, beta=np.zeros(int(gamma.sum())), delta2=delta2, Z=z)


@numba.njit(cache=True)
def _log_gamma_target(k, quad, log1p_delta2, shrink, n, a, b):
    # the Beta(a, b) normalizer cancels in every ratio and is left out
    return (-0.5 * k * log1p_delta2 + 0.5 * shrink * quad
            + math.lgamma(k + a) + math.lgamma(n - k + b))


@numba.njit(cache=True)
def _quad_for(cross, proj, gamma):
    n = gamma.shape[0]
    idx = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        if gamma[i]:
            idx[k] = i
            k += 1
    return _restricted_quad(cross, proj, idx[:k]), k


@numba.njit(cache=True)
def _gamma_sweep(cross, proj, gamma, perm, log_u, delta2, a, b):
    """One Metropolis sweep of single flips; mutates ``gamma`` in place."""
    n = gamma.shape[0]
    log1p_delta2 = math.log1p(delta2)
    shrink = delta2 / (1.0 + delta2)
    quad, k = _quad_for(cross, proj, gamma)
    if quad != quad:
        # current set is singular (only possible from an external start)
        quad = 0.0
    current = _log_gamma_target(k, quad, log1p_delta2, shrink, n, a, b)
    accepted = 0
    singular = 0
    for t in range(n):
        i = perm[t]
        gamma[i] = not gamma[i]
        q, k_new = _quad_for(cross, proj, gamma)
        if q != q:
            gamma[i] = not gamma[i]
            singular += 1
            continue
        proposed = _log_gamma_target(k_new, q, log1p_delta2, shrink, n, a, b)
        if log_u[t] < proposed - current:
            current = proposed
            accepted += 1
        else:
            gamma[i] = not gamma[i]
    return accepted, singular


def sample_gamma(state: ModelState, psi: GramMatrix, hyper: Hyperparams,
                 rng: np.random.Generator, sweeps: int = 1) -> tuple[np.ndarray, int, int]:
    """Run ``sweeps`` flip sweeps; return ``(gamma, n_accepted, n_singular)``.

    ``state`` is not modified.  Every sweep proposes ``N`` flips.
    """
    gamma = np.array(state.gamma, dtype=np.bool_, copy=True)
    proj = psi.entries.T @ state.Z
    accepted = singular = 0
    for _ in range(sweeps):
        perm = rng.permutation(gamma.size)
        with np.errstate(divide="ignore"):
            log_u = np.log(rng.random(gamma.size))
        acc, sing = _gamma_sweep(psi.cross, proj, gamma, perm, log_u,
                                 float(state.delta2), float(hyper.a), float(hyper.b))
        accepted += acc
        singular += sing
    return gamma, accepted, singular


def sample_beta(gamma, delta2: float, z, psi: GramMatrix, rng: np.random.Generator) -> np.ndarray:
    """Draw the active-kernel weights from their Gaussian full conditional.

    Mean ``s (Psi_g' Psi_g)^-1 Psi_g' Z`` and covariance
    ``s (Psi_g' Psi_g)^-1`` with shrinkage ``s = delta2 / (1 + delta2)``.
    Propagates :class:`SingularSystemError`.
    """
    sol = restricted_solve(psi, gamma, z)
    if sol.chol.shape[0] == 0:
        return np.zeros(0)
    shrink = delta2 / (1.0 + delta2)
    return shrink * sol.mean_core + math.sqrt(shrink) * sol.draw_standard(rng)


def delta2_posterior_params(beta, gamma, psi: GramMatrix, hyper: Hyperparams) -> tuple[float, float]:
    """Shape and scale of the inverse-gamma full conditional of ``delta2``.

    Scale is ``(nu + ||Psi_g beta||^2) / 2``; shape is ``(mu + K) / 2`` under
    the default rule, one half more under the ``"shifted"`` rule, plus
    ``hyper.delta2_shape_offset``.
    """
    beta = np.asarray(beta, dtype=float)
    idx = np.flatnonzero(np.asarray(gamma))
    if beta.size != idx.size:
        raise ValueError(f"beta has length {beta.size} but {idx.size} kernels are active")
    fitted = psi.entries[:, idx] @ beta if idx.size else np.zeros(psi.n)
    shape = 0.5 * (hyper.mu + idx.size) + hyper.delta2_shape_offset
    if hyper.delta2_shape_rule == "shifted":
        shape += 0.5
    return shape, 0.5 * (hyper.nu + float(fitted @ fitted))


def sample_delta2(beta, gamma, psi: GramMatrix, hyper: Hyperparams, rng: np.random.Generator) -> float:
    shape, scale = delta2_posterior_params(beta, gamma, psi, hyper)
    return sample_inverse_gamma(shape, scale, rng)


def _log_z_target(z, f, m, chi):
    r = z - f
    return -0.5 * float(r @ r) + log_m_likelihood(m, lambda_of(z), chi)


def sample_z_group(group: Group, state: ModelState, f: np.ndarray, hyper: Hyperparams,
                   rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """One random-walk Metropolis step on the latent values of a soft group.

    ``f`` is the vector of latent means ``Psi_g beta`` over all instances.
    Returns the group's new ``z`` (in member order) and whether the proposal
    was accepted.
    """
    if group.is_hard:
        raise ValueError(f"group {group.name!r} has m={group.m}; use sample_z_group_hard")
    members = np.asarray(group.members)
    chi = hyper.chi_for(group)
    z_cur = state.Z[members]
    f_g = f[members]
    proposal = z_cur + proposal_scale(group.size) * rng.standard_normal(group.size)
    log_ratio = _log_z_target(proposal, f_g, group.m, chi) - _log_z_target(z_cur, f_g, group.m, chi)
    if math.log(rng.random()) < log_ratio:
        return proposal, True
    return z_cur.copy(), False


def sample_z_group_hard(group: Group, state: ModelState, f: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Exact draws for a group with ``m`` in {0, 1}: independent truncated normals."""
    if not group.is_hard:
        raise ValueError(f"group {group.name!r} has m={group.m}; hard update needs m in {{0, 1}}")
    members = np.asarray(group.members)
    side = "positive" if group.m == 1.0 else "negative"
    return sample_truncated_normal(f[members], side, rng)


def _fitted(psi: GramMatrix, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(gamma)
    if idx.size == 0:
        return np.zeros(psi.n)
    return psi.entries[:, idx] @ beta


def run_chain(dataset: Dataset, hyper: Hyperparams, config: ChainConfig, *,
              psi: Optional[GramMatrix] = None, chain: int = 0,
              callback: Optional[Callable[[int, ModelState], None]] = None,
              ) -> tuple[list[PosteriorSample], ChainReport]:
    """Run one chain and return the retained ``(gamma, beta)`` samples.

    ``burn_in + n_samples * thin`` iterations are run and every ``thin``-th
    post-burn-in state is kept.  ``callback(t, state)`` is invoked after
    every iteration, burn-in included.
    """
    start = time.perf_counter()
    if psi is None:
        psi = gram(dataset.X, hyper.kernel)
    elif psi.n != dataset.n:
        raise ValueError("Gram matrix does not match the dataset")
    rng = chain_rng(config.seed, chain)
    groups = dataset.groups
    state = init_state(dataset, hyper, rng, psi)
    report = ChainReport(z_accepted=[0] * len(groups), z_proposed=[0] * len(groups),
                         seed=config.seed, chain=chain)
    samples: list[PosteriorSample] = []

    for t in range(config.n_iterations):
        gamma, acc, sing = sample_gamma(state, psi, hyper, rng, config.gamma_sweeps_per_iter)
        report.gamma_accepted += acc
        report.gamma_singular += sing
        report.gamma_proposed += gamma.size * config.gamma_sweeps_per_iter
        try:
            beta = sample_beta(gamma, state.delta2, state.Z, psi, rng)
        except SingularSystemError:
            report.beta_singular += 1
            if state.beta.size != np.count_nonzero(gamma):
                raise ChainError(f"iteration {t}: singular beta update with no compatible fallback")
            beta = state.beta
        state.gamma, state.beta = gamma, beta
        try:
            state.delta2 = sample_delta2(beta, gamma, psi, hyper, rng)
        except ValueError as exc:
            raise ChainError(f"iteration {t}: {exc}") from exc

        f = _fitted(psi, gamma, beta)
        for j, g in enumerate(groups):
            members = np.asarray(g.members)
            if g.is_hard:
                state.Z[members] = sample_z_group_hard(g, state, f, rng)
                report.z_accepted[j] += 1
                report.z_proposed[j] += 1
                continue
            for _ in range(config.z_steps_per_iter):
                z_new, ok = sample_z_group(g, state, f, hyper, rng)
                state.Z[members] = z_new
                report.z_accepted[j] += int(ok)
                report.z_proposed[j] += 1

        if not (math.isfinite(state.delta2) and np.all(np.isfinite(state.Z))
                and np.all(np.isfinite(state.beta))):
            raise ChainError(
                f"iteration {t}: non-finite state (delta2={state.delta2}, "
                f"K={state.k}, max|Z|={np.max(np.abs(state.Z))})"
            )
        if callback is not None:
            callback(t, state)
        if t >= config.burn_in and (t - config.burn_in + 1) % config.thin == 0:
            samples.append(PosteriorSample(gamma.copy(), beta.copy()))
            report.active_kernel_trace.append(int(beta.size))
            if config.record_delta2:
                report.delta2_trace.append(float(state.delta2))

    report.wall_time = time.perf_counter() - start
    return samples, report
