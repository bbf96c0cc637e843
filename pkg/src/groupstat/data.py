"""Synthetic benchmark datasets, fraction heuristics and CSV dataset files.

File format (UTF-8, header row mandatory, ``.`` as decimal point):

* instances: ``id,group,f1,...,fd[,label]``
* groups: ``group,m[,chi]`` (an empty ``chi`` cell means "use the global chi")

Floats are written with 17 significant digits so a save/load round trip is
exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import Dataset, Group

__all__ = [
    "SyntheticSpecA",
    "SyntheticSpecB",
    "AnnotationRecord",
    "DatasetFormatError",
    "UnknownGroupError",
    "FractionRangeError",
    "DuplicateIdError",
    "gen_dataset_a",
    "gen_dataset_b",
    "fractions_from_annotations",
    "perturb_fractions",
    "load_dataset",
    "save_dataset",
    "load_labels",
    "save_labels",
]

Point = tuple[float, float]


@dataclass(frozen=True)
class SyntheticSpecA:
    """Three mixed groups in 2-D with a non-linear class boundary.

    Positives come from a central blob ringed by six negative blobs, so
    the class boundary is a closed curve.  Coordinates are a reconstruction; only the group sizes and
    positive counts are fixed by the benchmark.  ``fractions=None`` uses the
    true per-group fraction rounded to two decimals.
    """

    group_names: tuple[str, ...] = ("A", "B", "C")
    group_sizes: tuple[int, ...] = (19, 16, 20)
    positives: tuple[int, ...] = (14, 4, 17)
    fractions: Optional[tuple[float, ...]] = None
    pos_means: tuple[Point, ...] = ((0.0, 0.0),)
    pos_sd: float = 0.6
    neg_means: tuple[Point, ...] = ((3.0, 0.0), (1.5, 2.598), (-1.5, 2.598),
                                    (-3.0, 0.0), (-1.5, -2.598), (1.5, -2.598))
    neg_sd: float = 0.6
    seed: int = 0

    def __post_init__(self):
        n = len(self.group_sizes)
        if len(self.positives) != n or len(self.group_names) != n:
            raise ValueError("group_names, group_sizes and positives must have equal length")
        if any(not 0 <= p <= s for p, s in zip(self.positives, self.group_sizes)):
            raise ValueError("positives must lie in [0, group size]")
        if self.fractions is not None and len(self.fractions) != n:
            raise ValueError("one fraction per group")


# Group fractions as published for benchmark A; 14/19 appears as 0.73.
BENCHMARK_FRACTIONS_A = (0.73, 0.25, 0.85)


@dataclass(frozen=True)
class SyntheticSpecB:
    """600 instances in 75 groups of 8; 62 groups hold negatives only.

    A tight positive cluster sits inside a broad negative cloud.  Each of
    the 13 mixed groups holds between ``min_pos`` and ``max_pos`` positives.
    """

    n_groups: int = 75
    group_size: int = 8
    n_mixed: int = 13
    min_pos: int = 2
    max_pos: int = 6
    pos_mean: Point = (1.0, 1.0)
    pos_sd: float = 0.5
    neg_mean: Point = (0.0, 0.0)
    neg_sd: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.n_mixed <= self.n_groups:
            raise ValueError("n_mixed must lie in [0, n_groups]")
        if not 1 <= self.min_pos <= self.max_pos <= self.group_size:
            raise ValueError("need 1 <= min_pos <= max_pos <= group_size")


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    words: tuple[str, ...]
    regions: int = 0


def _blob_mixture(rng: np.random.Generator, means, sd: float, count: int) -> np.ndarray:
    means = np.asarray(means, dtype=float)
    which = rng.integers(0, len(means), size=count)
    return means[which] + sd * rng.standard_normal((count, 2))


def gen_dataset_a(spec: SyntheticSpecA = SyntheticSpecA(), rng: Optional[np.random.Generator] = None) -> Dataset:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    X_parts, labels, groups = [], [], []
    start = 0
    for j, (name, size, n_pos) in enumerate(zip(spec.group_names, spec.group_sizes, spec.positives)):
        lab = np.zeros(size, dtype=int)
        lab[:n_pos] = 1
        lab = lab[rng.permutation(size)]
        pts = np.empty((size, 2))
        pts[lab == 1] = _blob_mixture(rng, spec.pos_means, spec.pos_sd, n_pos)
        pts[lab == 0] = _blob_mixture(rng, spec.neg_means, spec.neg_sd, size - n_pos)
        m = spec.fractions[j] if spec.fractions is not None else round(n_pos / size, 2)
        groups.append(Group(name, tuple(range(start, start + size)), float(m)))
        X_parts.append(pts)
        labels.append(lab)
        start += size
    return Dataset(np.vstack(X_parts), tuple(groups), labels=np.concatenate(labels))


def gen_dataset_b(spec: SyntheticSpecB = SyntheticSpecB(), rng: Optional[np.random.Generator] = None) -> Dataset:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    mixed = np.zeros(spec.n_groups, dtype=bool)
    mixed[rng.choice(spec.n_groups, size=spec.n_mixed, replace=False)] = True
    X_parts, labels, groups = [], [], []
    width = len(str(spec.n_groups - 1))
    for j in range(spec.n_groups):
        n_pos = int(rng.integers(spec.min_pos, spec.max_pos + 1)) if mixed[j] else 0
        lab = np.zeros(spec.group_size, dtype=int)
        lab[:n_pos] = 1
        lab = lab[rng.permutation(spec.group_size)]
        pts = np.empty((spec.group_size, 2))
        pts[lab == 1] = np.asarray(spec.pos_mean) + spec.pos_sd * rng.standard_normal((n_pos, 2))
        pts[lab == 0] = np.asarray(spec.neg_mean) + spec.neg_sd * rng.standard_normal(
            (spec.group_size - n_pos, 2))
        start = j * spec.group_size
        groups.append(Group(f"g{j:0{width}d}", tuple(range(start, start + spec.group_size)),
                            n_pos / spec.group_size))
        X_parts.append(pts)
        labels.append(lab)
    return Dataset(np.vstack(X_parts), tuple(groups), labels=np.concatenate(labels))


def fractions_from_annotations(records: Iterable[AnnotationRecord], target_word: str) -> list[float]:
    """Guess per-image positive fractions as ``1 / w`` for images tagged with the word.

    Assumes regions are spread evenly over an image's ``w`` annotation
    words; images without ``target_word`` get 0.
    """
    out = []
    for rec in records:
        if len(rec.words) == 0:
            raise ValueError(f"image {rec.image_id!r} has an empty word list")
        out.append(1.0 / len(rec.words) if target_word in rec.words else 0.0)
    return out


def perturb_fractions(dataset: Dataset, noise_chi: float, rng: np.random.Generator) -> Dataset:
    """Replace every ``m_j`` by a draw from Beta(chi*lam + 1, chi*(1 - lam) + 1).

    ``lam`` is the true fraction when labels are present, otherwise the
    current ``m_j``.
    """
    if not noise_chi > 0:
        raise ValueError(f"noise_chi must be positive, got {noise_chi}")
    lam = dataset.true_fractions() if dataset.labels is not None else np.array([g.m for g in dataset.groups])
    draws = rng.beta(noise_chi * lam + 1.0, noise_chi * (1.0 - lam) + 1.0)
    groups = [Group(g.name, g.members, float(m), g.chi) for g, m in zip(dataset.groups, draws)]
    return dataset.with_groups(groups)


# --------------------------------------------------------------------------
# CSV files


class DatasetFormatError(ValueError):
    def __init__(self, path, line: Optional[int], message: str):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class UnknownGroupError(DatasetFormatError):
    pass


class FractionRangeError(DatasetFormatError):
    pass


class DuplicateIdError(DatasetFormatError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _parse_float(path, line, text, what) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DatasetFormatError(path, line, f"cannot parse {what} {text!r}") from None
    if not math.isfinite(v):
        raise DatasetFormatError(path, line, f"{what} must be finite, got {text!r}")
    return v


def _read_rows(path) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [row for row in csv.reader(fh)]


def _read_groups(path) -> list[tuple[str, float, Optional[float]]]:
    rows = _read_rows(path)
    if not rows:
        raise DatasetFormatError(path, None, "no groups (missing header)")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["group", "m"] or len(header) > 3 or (len(header) == 3 and header[2] != "chi"):
        raise DatasetFormatError(path, 1, f"expected header 'group,m[,chi]', got {','.join(header)!r}")
    out, seen = [], set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetFormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
        name = row[0].strip()
        if name in seen:
            raise DuplicateIdError(path, lineno, f"duplicate group {name!r}")
        seen.add(name)
        m = _parse_float(path, lineno, row[1], "m")
        if not 0.0 <= m <= 1.0:
            raise FractionRangeError(path, lineno, f"m={row[1].strip()} outside [0, 1]")
        chi = None
        if len(row) == 3 and row[2].strip():
            chi = _parse_float(path, lineno, row[2], "chi")
            if chi < 0:
                raise DatasetFormatError(path, lineno, f"chi={row[2].strip()} is negative")
        out.append((name, m, chi))
    if not out:
        raise DatasetFormatError(path, None, "no groups")
    return out


def load_dataset(instances_path, groups_path) -> Dataset:
    """Read a dataset from its two CSV files; a ``label`` column is kept as true labels."""
    group_rows = _read_groups(groups_path)
    group_pos = {name: j for j, (name, _, _) in enumerate(group_rows)}
    rows = _read_rows(instances_path)
    if not rows:
        raise DatasetFormatError(instances_path, None, "no instances (missing header)")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["id", "group"]:
        raise DatasetFormatError(instances_path, 1, "header must start with 'id,group'")
    has_label = header[-1] == "label"
    feat_names = header[2:-1] if has_label else header[2:]
    if not feat_names:
        raise DatasetFormatError(instances_path, 1, "no feature columns")
    ids, X, labels = [], [], []
    members: list[list[int]] = [[] for _ in group_rows]
    seen: set[str] = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetFormatError(instances_path, lineno, f"expected {len(header)} fields, got {len(row)}")
        iid, gname = row[0].strip(), row[1].strip()
        if iid in seen:
            raise DuplicateIdError(instances_path, lineno, f"duplicate instance id {iid!r}")
        seen.add(iid)
        if gname not in group_pos:
            raise UnknownGroupError(instances_path, lineno, f"unknown group {gname!r}")
        feats = [_parse_float(instances_path, lineno, c, "feature") for c in row[2:2 + len(feat_names)]]
        if has_label:
            lab = row[-1].strip()
            if lab not in ("0", "1"):
                raise DatasetFormatError(instances_path, lineno, f"label must be 0 or 1, got {lab!r}")
            labels.append(int(lab))
        members[group_pos[gname]].append(len(ids))
        ids.append(iid)
        X.append(feats)
    if not ids:
        raise DatasetFormatError(instances_path, None, "no instances")
    groups = []
    for (name, m, chi), mem in zip(group_rows, members):
        if not mem:
            raise DatasetFormatError(groups_path, None, f"group {name!r} has no instances")
        groups.append(Group(name, tuple(mem), m, chi))
    return Dataset(np.array(X, dtype=float), tuple(groups), ids=tuple(ids),
                   labels=np.array(labels, dtype=int) if has_label else None)


def save_dataset(dataset: Dataset, instances_path, groups_path, include_labels: bool = True) -> None:
    group_of = dataset.group_of()
    with_labels = include_labels and dataset.labels is not None
    header = ["id", "group"] + [f"f{k + 1}" for k in range(dataset.dim)] + (["label"] if with_labels else [])
    with open(instances_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            row = [dataset.ids[i], dataset.groups[group_of[i]].name] + [_fmt(v) for v in dataset.X[i]]
            if with_labels:
                row.append(str(int(dataset.labels[i])))
            w.writerow(row)
    has_chi = any(g.chi is not None for g in dataset.groups)
    with open(groups_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "m", "chi"] if has_chi else ["group", "m"])
        for g in dataset.groups:
            row = [g.name, _fmt(g.m)]
            if has_chi:
                row.append("" if g.chi is None else _fmt(g.chi))
            w.writerow(row)


def save_labels(dataset: Dataset, path) -> None:
    if dataset.labels is None:
        raise ValueError("dataset carries no labels")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label"])
        for iid, lab in zip(dataset.ids, dataset.labels):
            w.writerow([iid, int(lab)])


def load_labels(path, ids: Sequence[str]) -> np.ndarray:
    """Read an ``id,label`` file and return labels aligned with ``ids``."""
    rows = _read_rows(path)
    if not rows or [h.strip() for h in rows[0]] != ["id", "label"]:
        raise DatasetFormatError(path, 1, "expected header 'id,label'")
    found: dict[str, int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2 or row[1].strip() not in ("0", "1"):
            raise DatasetFormatError(path, lineno, "expected 'id,0|1'")
        if row[0].strip() in found:
            raise DuplicateIdError(path, lineno, f"duplicate instance id {row[0].strip()!r}")
        found[row[0].strip()] = int(row[1])
    missing = [i for i in ids if i not in found]
    if missing:
        raise DatasetFormatError(path, None, f"no label for {len(missing)} instance(s), e.g. {missing[0]!r}")
    return np.array([found[i] for i in ids], dtype=int)
