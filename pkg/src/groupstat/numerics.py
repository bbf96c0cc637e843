"""Kernels, Gram matrices, restricted least-squares solves and scalar samplers.

Everything here is pure given an explicit ``numpy.random.Generator``.  The
Cholesky routine is compiled with numba because the kernel-selection sweep
calls it once per proposed flip, and that sweep dominates training time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numba
import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

__all__ = [
    "KernelSpec",
    "GramMatrix",
    "RestrictedSolve",
    "SingularSystemError",
    "kernel_eval",
    "kernel_matrix",
    "gram",
    "restricted_solve",
    "sample_truncated_normal",
    "sample_inverse_gamma",
    "std_normal_cdf",
]

KERNEL_KINDS = ("gaussian", "sigmoidal")

# Pivot floor relative to the largest diagonal entry.  Forming the normal
# equations squares the condition number, so smaller pivots carry no accurate
# digits; below the floor jitter is tried once, then the system is singular.
PIVOT_RTOL = 1e-9
JITTER_SCALE = 1e-8


class SingularSystemError(ArithmeticError):
    """Raised when the active-kernel normal equations cannot be factorized."""


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and its parameters.

    ``gaussian`` is ``exp(-sigma * ||x - x'||^2)``; ``sigmoidal`` is
    ``tanh(kappa * <x, x'> + theta)``.
    """

    kind: str = "gaussian"
    sigma: float = 1.0
    kappa: float = 1.0
    theta: float = 0.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError(f"gaussian kernel needs sigma > 0, got {self.sigma}")
        for name in ("sigma", "kappa", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"kernel parameter {name} must be finite")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "kappa": self.kappa, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(
            kind=d["kind"],
            sigma=float(d.get("sigma", 1.0)),
            kappa=float(d.get("kappa", 1.0)),
            theta=float(d.get("theta", 0.0)),
        )


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {x2.shape[0]}")
    if spec.kind == "gaussian":
        diff = x - x2
        return math.exp(-spec.sigma * float(diff @ diff))
    return math.tanh(spec.kappa * float(x @ x2) + spec.theta)


def kernel_matrix(spec: KernelSpec, A, B) -> np.ndarray:
    """Cross-kernel matrix with entries ``K(A[i], B[j])``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    if spec.kind == "gaussian":
        sq = (
            np.sum(A * A, axis=1)[:, None]
            + np.sum(B * B, axis=1)[None, :]
            - 2.0 * (A @ B.T)
        )
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-spec.sigma * sq)
    return np.tanh(spec.kappa * (A @ B.T) + spec.theta)


@dataclass(frozen=True, eq=False)
class GramMatrix:
    """Training Gram matrix ``entries[i, j] = K(x_i, x_j)``.

    Treat as read-only; ``cross`` (``entries.T @ entries``) is computed on
    first use and shared by every restricted solve.
    """

    entries: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @cached_property
    def cross(self) -> np.ndarray:
        c = self.entries.T @ self.entries
        c = 0.5 * (c + c.T)
        c.setflags(write=False)
        return c


def gram(X, spec: KernelSpec) -> GramMatrix:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 1:
        raise ValueError("gram needs at least one instance")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if spec.kind == "gaussian":
        sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
        entries = np.exp(-spec.sigma * sq)
    else:
        entries = kernel_matrix(spec, X, X)
    entries = 0.5 * (entries + entries.T)
    entries.setflags(write=False)
    return GramMatrix(entries)


@numba.njit(cache=True)
def _cholesky_into(G, L, jitter):
    """Lower Cholesky of ``G + jitter*I`` written into ``L``; False if a pivot fails."""
    k = G.shape[0]
    top = 0.0
    for i in range(k):
        if G[i, i] > top:
            top = G[i, i]
    floor = PIVOT_RTOL * (top + jitter)
    for j in range(k):
        s = G[j, j] + jitter
        for p in range(j):
            s -= L[j, p] * L[j, p]
        if not s > floor:
            return False
        d = math.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, k):
            t = G[i, j]
            for p in range(j):
                t -= L[i, p] * L[j, p]
            L[i, j] = t / d
        for i in range(j):
            L[i, j] = 0.0
    return True


@numba.njit(cache=True)
def _cholesky_jittered(G, L):
    """Factor ``G``; on failure retry once with ``1e-8 * trace / K`` jitter.

    Returns 0 (clean), 1 (jittered) or -1 (singular).
    """
    k = G.shape[0]
    if _cholesky_into(G, L, 0.0):
        return 0
    tr = 0.0
    for i in range(k):
        tr += G[i, i]
    jitter = JITTER_SCALE * tr / k
    if jitter > 0.0 and _cholesky_into(G, L, jitter):
        return 1
    return -1


@numba.njit(cache=True)
def _forward_quad(L, b):
    k = L.shape[0]
    w = np.empty(k)
    q = 0.0
    for i in range(k):
        t = b[i]
        for p in range(i):
            t -= L[i, p] * w[p]
        w[i] = t / L[i, i]
        q += w[i] * w[i]
    return q


@numba.njit(cache=True)
def _restricted_quad(cross, proj, idx):
    """Quadratic form ``b' G^-1 b`` for the active set ``idx``; NaN if singular."""
    k = idx.shape[0]
    if k == 0:
        return 0.0
    G = np.empty((k, k))
    b = np.empty(k)
    for r in range(k):
        b[r] = proj[idx[r]]
        for c in range(k):
            G[r, c] = cross[idx[r], idx[c]]
    L = np.zeros((k, k))
    if _cholesky_jittered(G, L) < 0:
        return np.nan
    return _forward_quad(L, b)


class RestrictedSolve(NamedTuple):
    """Result of solving the active-kernel normal equations.

    ``chol`` is the lower Cholesky factor of ``Psi_g' Psi_g`` (possibly
    jittered); ``mean_core = (Psi_g' Psi_g)^-1 Psi_g' Z`` and
    ``quad = Z' Psi_g (Psi_g' Psi_g)^-1 Psi_g' Z``.
    """

    mean_core: np.ndarray
    chol: np.ndarray
    quad: float
    jittered: bool

    def draw_standard(self, rng: np.random.Generator) -> np.ndarray:
        """One draw from ``N(0, (Psi_g' Psi_g)^-1)``."""
        eps = rng.standard_normal(self.chol.shape[0])
        return _back_substitute(self.chol, eps)


def _back_substitute(L: np.ndarray, y: np.ndarray) -> np.ndarray:
    if L.shape[0] == 0:
        return np.zeros(0)
    return solve_triangular(L, y, lower=True, trans="T", check_finite=False)


def _active_index(gamma) -> np.ndarray:
    g = np.asarray(gamma)
    if g.dtype != bool:
        if not np.all((g == 0) | (g == 1)):
            raise ValueError("selection vector must be binary")
        g = g.astype(bool)
    return np.flatnonzero(g)


def restricted_solve(psi: GramMatrix, gamma, z) -> RestrictedSolve:
    """Solve the normal equations restricted to the active kernels of ``gamma``.

    Raises :class:`SingularSystemError` when ``Psi_g' Psi_g`` stays
    non-positive-definite after one jittered retry.
    """
    idx = _active_index(gamma)
    z = np.asarray(z, dtype=float)
    if idx.size == 0:
        return RestrictedSolve(np.zeros(0), np.zeros((0, 0)), 0.0, False)
    G = np.ascontiguousarray(psi.cross[np.ix_(idx, idx)])
    b = psi.entries[:, idx].T @ z
    L = np.zeros_like(G)
    status = _cholesky_jittered(G, L)
    if status < 0:
        raise SingularSystemError(f"normal equations singular for {idx.size} active kernels")
    w = solve_triangular(L, b, lower=True, check_finite=False)
    mean_core = solve_triangular(L, w, lower=True, trans="T", check_finite=False)
    return RestrictedSolve(mean_core, L, float(w @ w), status == 1)


def std_normal_cdf(t):
    """Standard normal CDF (scalar in, float out; array in, array out)."""
    out = ndtr(t)
    return float(out) if np.ndim(out) == 0 else out


# Below this standardized bound plain normal rejection accepts with
# probability >= 0.4; above it the exponential proposal is used.
_TN_SWITCH = 0.25


def _std_normal_tail(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ``x ~ N(0, 1)`` conditioned on ``x >= a`` elementwise."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    todo = np.arange(a.size)
    flat_a = a.ravel()
    flat_out = out.ravel()
    while todo.size:
        at = flat_a[todo]
        low = at < _TN_SWITCH
        x = np.empty(todo.size)
        ok = np.empty(todo.size, dtype=bool)
        if np.any(low):
            x[low] = rng.standard_normal(int(low.sum()))
            ok[low] = x[low] >= at[low]
        high = ~low
        if np.any(high):
            ah = at[high]
            # optimal exponential rate for the tail proposal
            alpha = 0.5 * (ah + np.sqrt(ah * ah + 4.0))
            xh = ah + rng.standard_exponential(ah.size) / alpha
            u = rng.random(ah.size)
            x[high] = xh
            ok[high] = u <= np.exp(-0.5 * (xh - alpha) ** 2)
        flat_out[todo[ok]] = x[ok]
        todo = todo[~ok]
    return flat_out.reshape(a.shape)


def sample_truncated_normal(mean, side, rng: np.random.Generator):
    """Sample ``N(mean, 1)`` restricted to ``z > 0`` or ``z <= 0``.

    ``side`` is ``"positive"`` or ``"negative"``.  ``mean`` may be a scalar or
    an array; the result has the same shape.  Uses normal rejection near the
    bulk and an exponential-proposal rejection sampler in the tail, so the
    expected number of draws per value is bounded for any mean.
    """
    if side not in ("positive", "negative"):
        raise ValueError(f"side must be 'positive' or 'negative', got {side!r}")
    scalar = np.ndim(mean) == 0
    mu_in = np.asarray(mean, dtype=float)
    mu = mu_in.ravel()
    if not np.all(np.isfinite(mu)):
        raise ValueError("truncated normal mean must be finite")
    sign = 1.0 if side == "positive" else -1.0
    # map to a standard tail draw x >= a with z = sign * (x - a)
    a = -sign * mu
    z = np.empty_like(mu)
    pending = np.arange(mu.size)
    while pending.size:
        x = _std_normal_tail(a[pending], rng)
        cand = sign * (x - a[pending])
        good = cand > 0 if side == "positive" else cand <= 0
        z[pending[good]] = cand[good]
        pending = pending[~good]
    return float(z[0]) if scalar else z.reshape(mu_in.shape)


def sample_inverse_gamma(shape: float, scale: float, rng: np.random.Generator) -> float:
    """Draw from IG(shape, scale), density proportional to ``x^(-shape-1) exp(-scale/x)``."""
    if not (shape > 0 and math.isfinite(shape)):
        raise ValueError(f"inverse gamma shape must be positive, got {shape}")
    if not (scale > 0 and math.isfinite(scale)):
        raise ValueError(f"inverse gamma scale must be positive, got {scale}")
    return 1.0 / rng.gamma(shape, 1.0 / scale)
