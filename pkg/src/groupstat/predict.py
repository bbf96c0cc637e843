"""Posterior-averaged predictions from retained samples, and the model file.

A model file is JSON lines.  The first line is a header::

    {"format": "groupstat-model", "schema_version": 1, "kernel": {...},
     "n_train": N, "dim": d, "n_samples": T, "training_X": [[...], ...], ...}

followed by one line per retained sample::

    {"chain": c, "gamma": [active indices], "beta": [weights]}

Floats are written in shortest round-trip form, so loading reproduces the
samples exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import PosteriorSample
from .numerics import KernelSpec, kernel_matrix, std_normal_cdf

__all__ = [
    "TrainedModel",
    "ModelFileError",
    "predictive_prob",
    "predictive_probs",
    "predictive_grid",
    "classify",
    "save_model",
    "load_model",
]

MODEL_FORMAT = "groupstat-model"
MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class TrainedModel:
    samples: tuple[PosteriorSample, ...]
    training_X: np.ndarray
    kernel: KernelSpec
    chains: tuple[int, ...] = field(default=())

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.training_X, dtype=float))
        object.__setattr__(self, "training_X", X)
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise ValueError("a trained model needs at least one posterior sample")
        for s in self.samples:
            if s.gamma.size != X.shape[0]:
                raise ValueError("sample size does not match training_X")
        if not self.chains:
            object.__setattr__(self, "chains", (0,) * len(self.samples))
        elif len(self.chains) != len(self.samples):
            raise ValueError("one chain tag per sample")

    @property
    def dim(self) -> int:
        return self.training_X.shape[1]

    def weight_matrix(self) -> np.ndarray:
        """Dense ``(T, N)`` coefficients with zeros for inactive kernels."""
        W = np.zeros((len(self.samples), self.training_X.shape[0]))
        for t, s in enumerate(self.samples):
            W[t, s.active] = s.beta
        return W


def predictive_probs(model: TrainedModel, X) -> np.ndarray:
    """Posterior-mean ``Pr(y = 1 | x)`` for each row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise ValueError(f"query dimension {X.shape[1]} does not match model dimension {model.dim}")
    Kx = kernel_matrix(model.kernel, X, model.training_X)
    latent = Kx @ model.weight_matrix().T
    return np.mean(std_normal_cdf(latent), axis=1)


def predictive_prob(model: TrainedModel, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("predictive_prob takes a single feature vector")
    return float(predictive_probs(model, x[None, :])[0])


def grid_centers(lo: float, hi: float, res: int) -> np.ndarray:
    return lo + (np.arange(res) + 0.5) * (hi - lo) / res


def predictive_grid(model: TrainedModel, bounds: Sequence[tuple[float, float]],
                    resolution: Sequence[int]) -> np.ndarray:
    """Probabilities at cell centers of a 2-D raster.

    Returns an array of shape ``(resolution[1], resolution[0])``: row ``i``
    is the ``i``-th cell along the second feature (ascending), column ``j``
    the ``j``-th cell along the first.
    """
    if model.dim != 2:
        raise ValueError(f"grid export is only defined for 2-D features, model has d={model.dim}")
    if len(bounds) != 2 or len(resolution) != 2:
        raise ValueError("need bounds and resolution for both dimensions")
    rx, ry = (int(r) for r in resolution)
    if rx < 1 or ry < 1:
        raise ValueError("resolution must be >= 1")
    (x0, x1), (y0, y1) = bounds
    if not (x1 > x0 and y1 > y0):
        raise ValueError("each bound needs lo < hi")
    xs = grid_centers(x0, x1, rx)
    ys = grid_centers(y0, y1, ry)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    return predictive_probs(model, pts).reshape(ry, rx)


def classify(model: TrainedModel, X, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (predictive_probs(model, X) >= threshold).astype(int)


class ModelFileError(ValueError):
    pass


def save_model(model: TrainedModel, path, extra: Optional[dict] = None) -> None:
    """Write ``model`` as JSON lines; ``extra`` is merged into the header."""
    header = {
        "format": MODEL_FORMAT,
        "schema_version": MODEL_SCHEMA_VERSION,
        "kernel": model.kernel.to_dict(),
        "n_train": int(model.training_X.shape[0]),
        "dim": model.dim,
        "n_samples": len(model.samples),
    }
    if extra:
        header.update(extra)
    header["training_X"] = model.training_X.tolist()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for tag, s in zip(model.chains, model.samples):
            rec = {"chain": int(tag), "gamma": s.active.tolist(), "beta": s.beta.tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_model(path) -> TrainedModel:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ModelFileError(f"{path}: empty model file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}:1: bad header: {exc}") from None
    if header.get("format") != MODEL_FORMAT:
        raise ModelFileError(f"{path}: not a {MODEL_FORMAT} file")
    if header.get("schema_version") != MODEL_SCHEMA_VERSION:
        raise ModelFileError(f"{path}: unsupported schema version {header.get('schema_version')!r}")
    X = np.asarray(header["training_X"], dtype=float).reshape(header["n_train"], header["dim"])
    kernel = KernelSpec.from_dict(header["kernel"])
    samples, tags = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            samples.append(PosteriorSample.from_active(X.shape[0], rec["gamma"], rec["beta"]))
        except (json.JSONDecodeError, KeyError, ValueError, IndexError) as exc:
            raise ModelFileError(f"{path}:{lineno}: bad sample record: {exc}") from None
        tags.append(int(rec.get("chain", 0)))
    if len(samples) != header["n_samples"]:
        raise ModelFileError(f"{path}: header announces {header['n_samples']} samples, found {len(samples)}")
    return TrainedModel(tuple(samples), X, kernel, tuple(tags))
