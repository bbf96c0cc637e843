"""Data and state containers plus the log-densities of the hierarchical model.

The model, written out once:

* ``Pr(y = 1 | x) = Phi(f(x))`` with ``f(x) = sum_i gamma_i beta_i K(x, x_i)``
* ``beta | gamma, delta2 ~ N(0, delta2 (Psi_g' Psi_g)^-1)``
* ``delta2 ~ IG(mu / 2, nu / 2)``
* ``gamma_i ~ Bernoulli(tau)``, ``tau ~ Beta(a, b)`` (integrated out)
* ``Z | beta, gamma ~ N(Psi_g beta, I)``
* ``m_j | lambda_j ~ Beta(chi lambda_j + 1, chi (1 - lambda_j) + 1)`` where
  ``lambda_j`` is the fraction of positive ``z`` in group ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import betaln, gammaln, xlog1py, xlogy

from .numerics import (
    GramMatrix,
    KernelSpec,
    kernel_matrix,
    restricted_solve,
    std_normal_cdf,
)

__all__ = [
    "Group",
    "Dataset",
    "Hyperparams",
    "ModelState",
    "PosteriorSample",
    "latent_f",
    "prob_positive",
    "lambda_of",
    "log_m_likelihood",
    "log_gamma_prior",
    "log_gamma_conditional",
]

DELTA2_SHAPE_RULES = ("derived", "shifted")


@dataclass(frozen=True)
class Group:
    name: str
    members: tuple[int, ...]
    m: float
    chi: Optional[float] = None

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def is_hard(self) -> bool:
        return self.m == 0.0 or self.m == 1.0


@dataclass(frozen=True, eq=False)
class Dataset:
    """Grouped instances with per-group positive-fraction estimates.

    ``X`` is ``(N, d)``; ``groups`` partition ``range(N)``.  ``labels`` are
    the true instance labels, kept for evaluation only; the sampler never
    reads them.
    """

    X: np.ndarray
    groups: tuple[Group, ...]
    ids: tuple[str, ...] = ()
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        object.__setattr__(self, "X", X)
        n = X.shape[0]
        if not self.ids:
            object.__setattr__(self, "ids", tuple(str(i) for i in range(n)))
        if len(self.ids) != n:
            raise ValueError(f"{len(self.ids)} ids for {n} instances")
        if len(set(self.ids)) != n:
            raise ValueError("instance ids must be unique")
        if not self.groups:
            raise ValueError("no groups")
        if len({g.name for g in self.groups}) != len(self.groups):
            raise ValueError("group names must be unique")
        seen = np.zeros(n, dtype=int)
        for g in self.groups:
            if g.size < 1:
                raise ValueError(f"group {g.name!r} is empty")
            if not 0.0 <= g.m <= 1.0:
                raise ValueError(f"group {g.name!r}: m={g.m} outside [0, 1]")
            if g.chi is not None and not (g.chi >= 0 and math.isfinite(g.chi)):
                raise ValueError(f"group {g.name!r}: chi must be finite and >= 0")
            seen[list(g.members)] += 1
        if np.any(seen != 1):
            raise ValueError("every instance must belong to exactly one group")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        if self.labels is not None:
            lab = np.asarray(self.labels).astype(int)
            if lab.shape != (n,) or not np.all((lab == 0) | (lab == 1)):
                raise ValueError("labels must be a binary vector of length N")
            object.__setattr__(self, "labels", lab)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def group_of(self) -> np.ndarray:
        out = np.empty(self.n, dtype=int)
        for j, g in enumerate(self.groups):
            out[list(g.members)] = j
        return out

    def true_fractions(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("dataset carries no true labels")
        return np.array([self.labels[list(g.members)].mean() for g in self.groups])

    def without_labels(self) -> "Dataset":
        return replace(self, labels=None)

    def with_groups(self, groups: Sequence[Group]) -> "Dataset":
        return replace(self, groups=tuple(groups))


@dataclass(frozen=True)
class Hyperparams:
    """Prior settings.  Defaults are the uninformative values a=b=mu=nu=1, chi=1000.

    ``delta2_shape_rule`` selects the inverse-gamma shape used for the
    ``delta2`` update: ``"derived"`` gives ``(mu + K) / 2`` (the conjugate
    result), ``"shifted"`` gives ``(mu + K + 1) / 2``.  ``delta2_shape_offset``
    is added on top and exists only for negative-control experiments.
    """

    kernel: KernelSpec = field(default_factory=KernelSpec)
    a: float = 1.0
    b: float = 1.0
    mu: float = 1.0
    nu: float = 1.0
    chi: float = 1000.0
    delta2_shape_rule: str = "derived"
    delta2_shape_offset: float = 0.0

    def __post_init__(self):
        if not (self.a >= 1 and self.b >= 1):
            raise ValueError(f"need a, b >= 1, got a={self.a}, b={self.b}")
        if not (self.mu > 0 and self.nu > 0):
            raise ValueError(f"need mu, nu > 0, got mu={self.mu}, nu={self.nu}")
        if not (self.chi >= 0 and math.isfinite(self.chi)):
            raise ValueError(f"need finite chi >= 0, got {self.chi}")
        if self.delta2_shape_rule not in DELTA2_SHAPE_RULES:
            raise ValueError(f"delta2_shape_rule must be one of {DELTA2_SHAPE_RULES}")

    def chi_for(self, group: Group) -> float:
        return self.chi if group.chi is None else group.chi


@dataclass
class ModelState:
    """Current values of one Markov chain.

    ``beta`` holds coefficients of the active kernels only, ordered by
    ascending instance index.
    """

    gamma: np.ndarray
    beta: np.ndarray
    delta2: float
    Z: np.ndarray

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.gamma)

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.gamma))

    def check(self) -> None:
        if self.beta.shape != (self.k,):
            raise ValueError(f"beta has length {self.beta.size} but {self.k} kernels are active")
        if not self.delta2 > 0:
            raise ValueError("delta2 must be positive")
        if not (np.all(np.isfinite(self.Z)) and np.all(np.isfinite(self.beta)) and math.isfinite(self.delta2)):
            raise FloatingPointError("non-finite chain state")


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    gamma: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma).astype(bool)
        b = np.asarray(self.beta, dtype=float).ravel()
        if b.size != np.count_nonzero(g):
            raise ValueError(f"beta has length {b.size} but {np.count_nonzero(g)} kernels are active")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.gamma)

    @property
    def k(self) -> int:
        return self.beta.size

    @classmethod
    def from_active(cls, n: int, active: Sequence[int], beta: Sequence[float]) -> "PosteriorSample":
        g = np.zeros(n, dtype=bool)
        g[list(active)] = True
        order = np.argsort(np.asarray(active, dtype=int), kind="stable")
        return cls(g, np.asarray(beta, dtype=float)[order])

    def __eq__(self, other):
        if not isinstance(other, PosteriorSample):
            return NotImplemented
        return np.array_equal(self.gamma, other.gamma) and np.array_equal(self.beta, other.beta)


def latent_f(x, sample: PosteriorSample, training_X, spec: KernelSpec) -> float:
    """Kernel-machine output ``sum over active i of beta_i K(x, x_i)``."""
    training_X = np.atleast_2d(np.asarray(training_X, dtype=float))
    if sample.gamma.size != training_X.shape[0]:
        raise ValueError("sample does not match the training set size")
    idx = sample.active
    if idx.size == 0:
        return 0.0
    k = kernel_matrix(spec, np.asarray(x, dtype=float).reshape(1, -1), training_X[idx])
    return float(k[0] @ sample.beta)


def prob_positive(x, sample: PosteriorSample, training_X, spec: KernelSpec) -> float:
    return std_normal_cdf(latent_f(x, sample, training_X, spec))


def lambda_of(z_group) -> float:
    """Fraction of strictly positive latent values; ``z == 0`` counts as negative."""
    z = np.asarray(z_group, dtype=float)
    if z.size == 0:
        raise ValueError("lambda_of needs a non-empty group")
    return np.count_nonzero(z > 0) / z.size


def log_m_likelihood(m: float, lam: float, chi: float) -> float:
    """Log Beta(chi*lam + 1, chi*(1 - lam) + 1) density evaluated at ``m``.

    The Beta normalizer depends on ``lam`` and is kept: without it the
    density is log-linear in ``lam`` and has no interior mode.
    ``m`` must lie strictly inside (0, 1); the boundary cases are handled
    by the sampler as hard sign constraints.
    """
    if not 0.0 < m < 1.0:
        raise ValueError(f"log_m_likelihood needs 0 < m < 1, got {m}")
    alpha = chi * lam
    beta = chi * (1.0 - lam)
    return float(xlogy(alpha, m) + xlog1py(beta, -m) - betaln(alpha + 1.0, beta + 1.0))


def log_gamma_prior(k: int, n: int, a: float, b: float) -> float:
    """Log prior probability of one selection vector with ``k`` of ``n`` active.

    This is the Beta-Bernoulli marginal with ``tau`` integrated out,
    normalized so that it sums to one over all ``2^n`` vectors.
    """
    if not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    return float(gammaln(k + a) + gammaln(n - k + b) - gammaln(n + a + b) - betaln(a, b))


def _gamma_conditional_terms(k: int, quad: float, delta2: float, n: int, a: float, b: float) -> float:
    return (
        -0.5 * k * math.log1p(delta2)
        + 0.5 * (delta2 / (1.0 + delta2)) * quad
        + log_gamma_prior(k, n, a, b)
    )


def log_gamma_conditional(gamma, delta2: float, z, psi: GramMatrix, a: float, b: float) -> float:
    """Unnormalized log ``p(gamma | delta2, Z)`` with ``beta`` integrated out.

    The ``-Z'Z / 2`` term is constant in ``gamma`` and omitted.  Raises
    :class:`~groupstat.numerics.SingularSystemError` for a singular active set.
    """
    g = np.asarray(gamma)
    n = g.size
    k = int(np.count_nonzero(g))
    quad = restricted_solve(psi, g, z).quad if k else 0.0
    return _gamma_conditional_terms(k, quad, delta2, n, a, b)
