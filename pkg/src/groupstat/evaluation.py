"""AUC, sparsity summaries, the supervision ablation and the prior-recovery check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .numerics import gram
from .model import Dataset, Group, Hyperparams, PosteriorSample, log_gamma_prior
from .predict import TrainedModel, predictive_probs
from .sampler import ChainConfig, ChainReport, run_chain

__all__ = [
    "EvalReport",
    "PriorRecoveryResult",
    "auc",
    "auc_bruteforce",
    "sparsity_summary",
    "train_model",
    "evaluate_model",
    "ablated_dataset",
    "ablation_compare",
    "k_marginal",
    "prior_recovery_test",
]


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly, ties count 1/2."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    if not np.all(pos | (labels == 0)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    ranks = stats.rankdata(scores)  # average ranks: ties contribute 1/2
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    """Quadratic pair-counting reference for :func:`auc`."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    sp, sn = scores[labels == 1], scores[labels == 0]
    if sp.size == 0 or sn.size == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    diff = sp[:, None] - sn[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return float(wins / (sp.size * sn.size))


def sparsity_summary(samples: Sequence[PosteriorSample] | Sequence[int]) -> dict:
    """Mean and 5/50/95% quantiles of the number of active kernels."""
    ks = np.array([s.k if isinstance(s, PosteriorSample) else int(s) for s in samples], dtype=float)
    if ks.size == 0:
        raise ValueError("no samples")
    q05, q50, q95 = np.quantile(ks, [0.05, 0.5, 0.95])
    return {"mean": float(ks.mean()), "q05": float(q05), "q50": float(q50), "q95": float(q95)}


@dataclass
class EvalReport:
    auc: float
    n_pos: int
    n_neg: int
    mean_active_kernels: float
    k_quantiles: dict = field(default_factory=dict)
    per_seed_auc: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "mean_active_kernels": self.mean_active_kernels,
            "k_quantiles": dict(self.k_quantiles),
            "per_seed_auc": list(self.per_seed_auc),
        }


def _chain_job(args):
    dataset, hyper, config, chain = args
    return run_chain(dataset, hyper, config, chain=chain)


def train_model(dataset: Dataset, hyper: Hyperparams, config: ChainConfig,
                n_chains: int = 1, workers: int = 1) -> tuple[TrainedModel, list[ChainReport]]:
    """Run ``n_chains`` independent chains and pool their samples in chain order.

    With ``workers > 1`` the chains run in separate processes; the result
    does not depend on ``workers``.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    if workers > 1 and n_chains > 1:
        from concurrent.futures import ProcessPoolExecutor

        jobs = [(dataset, hyper, config, c) for c in range(n_chains)]
        with ProcessPoolExecutor(max_workers=min(workers, n_chains)) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        psi = gram(dataset.X, hyper.kernel)
        results = [run_chain(dataset, hyper, config, psi=psi, chain=c) for c in range(n_chains)]
    samples: list[PosteriorSample] = []
    tags: list[int] = []
    for c, (s, _) in enumerate(results):
        samples.extend(s)
        tags.extend([c] * len(s))
    model = TrainedModel(tuple(samples), dataset.X, hyper.kernel, tuple(tags))
    return model, [rep for _, rep in results]


def evaluate_model(model: TrainedModel, X, labels) -> EvalReport:
    labels = np.asarray(labels).astype(int)
    probs = predictive_probs(model, X)
    summary = sparsity_summary(model.samples)
    return EvalReport(
        auc=auc(probs, labels),
        n_pos=int(labels.sum()),
        n_neg=int(labels.size - labels.sum()),
        mean_active_kernels=summary["mean"],
        k_quantiles={k: summary[k] for k in ("q05", "q50", "q95")},
    )


def ablated_dataset(dataset: Dataset) -> Dataset:
    """Binary-group-label style supervision.

    Groups whose true fraction is 0 stay hard negatives; every other group
    gets ``chi_j = 0``, which makes its fraction uninformative (this also
    drops the "at least one positive" constraint of classical MI labels).
    """
    lam = dataset.true_fractions()
    groups = [g if lam[j] == 0.0 else Group(g.name, g.members, g.m, 0.0)
              for j, g in enumerate(dataset.groups)]
    return dataset.with_groups(groups)


def ablation_compare(dataset: Dataset, hyper: Hyperparams, config: ChainConfig,
                     n_chains: int = 1) -> tuple[EvalReport, EvalReport]:
    """Train on full fractions and on ablated supervision; score both on the true labels."""
    if dataset.labels is None:
        raise ValueError("ablation_compare needs true labels")
    labels = dataset.labels
    blind = dataset.without_labels()
    full_model, _ = train_model(blind, hyper, config, n_chains)
    ablated_model, _ = train_model(ablated_dataset(dataset).without_labels(), hyper, config, n_chains)
    return (evaluate_model(full_model, dataset.X, labels),
            evaluate_model(ablated_model, dataset.X, labels))


def k_marginal(n: int, a: float, b: float) -> np.ndarray:
    """Prior probability of ``k`` active kernels, ``k = 0..n``."""
    ks = np.arange(n + 1)
    log_binom = gammaln(n + 1) - gammaln(ks + 1) - gammaln(n - ks + 1)
    return np.exp([lb + log_gamma_prior(int(k), n, a, b) for lb, k in zip(log_binom, ks)])


@dataclass
class PriorRecoveryResult:
    tv_k: float
    ks_stat: float
    ks_pvalue: float
    k_hist: list[float]
    k_expected: list[float]
    tv_threshold: float = 0.05
    alpha: float = 0.01

    @property
    def passed(self) -> bool:
        return self.tv_k < self.tv_threshold and self.ks_pvalue > self.alpha


def prior_recovery_test(group_sizes: Sequence[int], hyper: Hyperparams, config: ChainConfig,
                        tv_threshold: float = 0.05, alpha: float = 0.01,
                        features: Optional[np.ndarray] = None) -> PriorRecoveryResult:
    """Run the full chain with zero confidence and compare it with the prior.

    With ``chi = 0`` the fractions carry no information, so the retained
    number of active kernels must follow the Beta-Bernoulli marginal and
    ``delta2`` must follow IG(mu/2, nu/2).
    """
    if hyper.chi != 0:
        raise ValueError("prior recovery needs chi = 0")
    n = int(sum(group_sizes))
    if features is None:
        features = np.random.default_rng(config.seed).normal(size=(n, 2))
    groups, start = [], 0
    for j, size in enumerate(group_sizes):
        groups.append(Group(f"g{j}", tuple(range(start, start + size)), 0.5, 0.0))
        start += size
    dataset = Dataset(features, tuple(groups))
    _, report = run_chain(dataset, hyper, replace(config, record_delta2=True))
    ks_trace = np.asarray(report.active_kernel_trace)
    hist = np.bincount(ks_trace, minlength=n + 1) / ks_trace.size
    expected = k_marginal(n, hyper.a, hyper.b)
    tv = 0.5 * float(np.abs(hist - expected).sum())
    ig = stats.invgamma(a=hyper.mu / 2.0, scale=hyper.nu / 2.0)
    ks = stats.kstest(report.delta2_trace, ig.cdf)
    return PriorRecoveryResult(tv, float(ks.statistic), float(ks.pvalue),
                               hist.tolist(), expected.tolist(), tv_threshold, alpha)
