"""Learning instance-level classifiers from per-group label proportions."""

from .model import Dataset, Group, Hyperparams, ModelState, PosteriorSample
from .numerics import GramMatrix, KernelSpec, SingularSystemError, gram
from .sampler import ChainConfig, ChainReport, run_chain

__version__ = "0.1.0"

__all__ = [
    "ChainConfig",
    "ChainReport",
    "Dataset",
    "GramMatrix",
    "Group",
    "Hyperparams",
    "KernelSpec",
    "ModelState",
    "PosteriorSample",
    "SingularSystemError",
    "gram",
    "run_chain",
]
