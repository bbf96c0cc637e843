"""Command-line front end: ``groupstat {gen,train,predict,eval}``.

Settings can come from a flat ``key = value`` config file (``--config``);
flags given on the command line override it.  Exit status is 0 on success,
2 for invalid input or configuration (nothing is written) and 1 when a run
fails after validation.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import (
    DatasetFormatError,
    SyntheticSpecA,
    SyntheticSpecB,
    gen_dataset_a,
    gen_dataset_b,
    load_dataset,
    load_labels,
    save_dataset,
    save_labels,
)
from .evaluation import ablation_compare, evaluate_model, sparsity_summary, train_model
from .model import Hyperparams
from .numerics import KernelSpec
from .predict import ModelFileError, load_model, predictive_grid, predictive_probs, save_model
from .sampler import ChainConfig, ChainError

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2

EVAL_KEYS_HELP = """\
eval writes JSON with keys: auc, n_pos, n_neg, mean_active_kernels,
k_quantiles {q05, q50, q95}, per_seed_auc.  With --ablation the output is
{"full": <report>, "ablated": <report>}.
"""


class ValidationError(Exception):
    pass


# key -> (type, default); defaults reproduce the benchmark settings
CONFIG_KEYS = {
    "instances": (str, None),
    "groups": (str, None),
    "out": (str, None),
    "kernel": (str, "gaussian"),
    "sigma": (float, 1.0),
    "kappa": (float, 1.0),
    "theta": (float, 0.0),
    "a": (float, 1.0),
    "b": (float, 1.0),
    "mu": (float, 1.0),
    "nu": (float, 1.0),
    "chi": (float, 1000.0),
    "delta2_shape_rule": (str, "derived"),
    "burn_in": (int, 1000),
    "n_samples": (int, 1000),
    "thin": (int, 1),
    "seed": (int, 0),
    "gamma_sweeps": (int, 1),
    "z_steps": (int, 1),
    "chains": (int, 1),
}


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value, f"{path}:{lineno}")
    return out


def _convert(key, value, where):
    typ = CONFIG_KEYS[key][0]
    try:
        v = typ(value)
    except ValueError:
        raise ValidationError(f"{where}: {key} expects {typ.__name__}, got {value!r}") from None
    if typ is float and not math.isfinite(v):
        raise ValidationError(f"{where}: {key} must be finite")
    return v


def resolve_settings(args) -> dict:
    settings = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    if getattr(args, "config", None):
        settings.update(read_config(args.config))
    for key in CONFIG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = v
    return settings


def build_hyper(s: dict) -> Hyperparams:
    try:
        kernel = KernelSpec(kind=s["kernel"], sigma=s["sigma"], kappa=s["kappa"], theta=s["theta"])
        return Hyperparams(kernel=kernel, a=s["a"], b=s["b"], mu=s["mu"], nu=s["nu"], chi=s["chi"],
                           delta2_shape_rule=s["delta2_shape_rule"])
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def build_chain_config(s: dict) -> ChainConfig:
    try:
        cfg = ChainConfig(burn_in=s["burn_in"], n_samples=s["n_samples"], thin=s["thin"], seed=s["seed"],
                          gamma_sweeps_per_iter=s["gamma_sweeps"], z_steps_per_iter=s["z_steps"])
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if cfg.n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if s["chains"] < 1:
        raise ValidationError("chains must be >= 1")
    return cfg


def _require_file(path, what):
    if not path:
        raise ValidationError(f"missing {what} path")
    if not Path(path).is_file():
        raise ValidationError(f"{what} file not found: {path}")


def _check_writable_dir(path):
    p = Path(path)
    probe = p
    while not probe.exists():
        probe = probe.parent
    if not probe.is_dir() or not os.access(probe, os.W_OK):
        raise ValidationError(f"cannot write to {path}")


def _check_writable_file(path):
    _check_writable_dir(Path(path).parent if str(Path(path).parent) else ".")
    if Path(path).is_dir():
        raise ValidationError(f"{path} is a directory")


def _load(instances, groups):
    try:
        return load_dataset(instances, groups)
    except (DatasetFormatError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    _check_writable_dir(args.out)
    if args.name == "a":
        ds = gen_dataset_a(SyntheticSpecA(seed=args.seed))
    else:
        ds = gen_dataset_b(SyntheticSpecB(seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "instances.csv", out / "groups.csv", include_labels=False)
    save_labels(ds, out / "labels.csv")
    true = ds.true_fractions()
    rows = [("group", "n", "m", "true")]
    rows += [(g.name, str(g.size), f"{g.m:.2f}", f"{t:.4f}") for g, t in zip(ds.groups, true)]
    if len(rows) > 12:
        n_zero = sum(1 for g in ds.groups if g.m == 0.0)
        print(f"{ds.n} instances in {len(ds.groups)} groups: {n_zero} with m = 0, "
              f"{len(ds.groups) - n_zero} mixed; {int(ds.labels.sum())} positives")
    else:
        for r in rows:
            print("  ".join(f"{c:>6}" for c in r))
        print(f"{ds.n} instances in {len(ds.groups)} groups")
    return EXIT_OK


def _run_training(args):
    s = resolve_settings(args)
    _require_file(s["instances"], "instances")
    _require_file(s["groups"], "groups")
    hyper = build_hyper(s)
    cfg = build_chain_config(s)
    ds = _load(s["instances"], s["groups"])
    if ds.labels is not None:
        raise ValidationError("instances file has a label column; training never reads labels, "
                              "keep them in a separate labels file")
    return s, hyper, cfg, ds


def cmd_train(args) -> int:
    s, hyper, cfg, ds = _run_training(args)
    out = Path(s["out"] or ".")
    _check_writable_dir(out)
    try:
        model, reports = train_model(ds, hyper, cfg, n_chains=s["chains"], workers=s["chains"])
    except ChainError as exc:
        print(f"error: chain aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out.mkdir(parents=True, exist_ok=True)
    hyper_d = asdict(hyper)
    cfg_d = asdict(cfg)
    cfg_d["chains"] = s["chains"]
    save_model(model, out / "model.jsonl", extra={"ids": list(ds.ids), "hyper": hyper_d, "chain_config": cfg_d})
    report = {"chains": [r.to_dict() for r in reports], "sparsity": sparsity_summary(model.samples)}
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    summary = report["sparsity"]
    print(f"{len(model.samples)} samples, mean active kernels {summary['mean']:.2f}, "
          f"gamma flip acceptance {np.mean([r.gamma_flip_acceptance for r in reports]):.3f}, "
          f"{sum(r.wall_time for r in reports):.1f}s")
    return EXIT_OK


def _read_query(path):
    """Instances for prediction: the group column is ignored, a label column is dropped."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValidationError(f"{path}: empty instances file")
    header = [h.strip() for h in rows[0]]
    if header[:1] != ["id"]:
        raise ValidationError(f"{path}:1: header must start with 'id'")
    feat_cols = [k for k, h in enumerate(header) if h not in ("id", "group", "label")]
    label_col = header.index("label") if "label" in header else None
    ids, X, labels = [], [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")
        try:
            X.append([float(r[k]) for k in feat_cols])
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-numeric feature") from None
        ids.append(r[0].strip())
        if label_col is not None:
            labels.append(int(r[label_col]))
    return ids, np.array(X, dtype=float).reshape(len(ids), len(feat_cols)), (np.array(labels) if label_col is not None else None)


def _load_model_checked(path):
    _require_file(path, "model")
    try:
        return load_model(path)
    except (ModelFileError, KeyError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def write_pgm(probs: np.ndarray, path) -> None:
    """8-bit binary PGM, pixel = floor(255 p + 1/2); top row is the highest second-feature cell."""
    pix = np.floor(255.0 * np.asarray(probs, dtype=float) + 0.5).astype(np.uint8)[::-1]
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def cmd_predict(args) -> int:
    model = _load_model_checked(args.model)
    if args.grid is not None:
        lo, hi, res = args.grid
        if model.dim != 2:
            raise ValidationError(f"grid export needs 2-D features, model has d={model.dim}")
        if not (hi > lo) or res != int(res) or res < 1:
            raise ValidationError("--grid needs LO < HI and an integer RES >= 1")
        out = args.out or "grid.csv"
        _check_writable_file(out)
        if args.pgm:
            _check_writable_file(args.pgm)
        grid = predictive_grid(model, [(lo, hi), (lo, hi)], (int(res), int(res)))
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            for row in grid:
                fh.write(",".join(_fmt(p) for p in row) + "\n")
        if args.pgm:
            write_pgm(grid, args.pgm)
        return EXIT_OK
    if not args.instances:
        raise ValidationError("predict needs --instances or --grid")
    _require_file(args.instances, "instances")
    ids, X, _ = _read_query(args.instances)
    if X.shape[1] != model.dim:
        raise ValidationError(f"instances have {X.shape[1]} features, model expects {model.dim}")
    out = args.out or "scores.csv"
    _check_writable_file(out)
    probs = predictive_probs(model, X)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("id,prob\n")
        for i, p in zip(ids, probs):
            fh.write(f"{i},{_fmt(p)}\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_file(args.instances, "instances")
    if args.ablation:
        s = resolve_settings(args)
        s["instances"] = args.instances
        _require_file(args.groups, "groups")
        hyper = build_hyper(s)
        cfg = build_chain_config(s)
        ds = _load(args.instances, args.groups)
        if args.labels:
            _require_file(args.labels, "labels")
            ds = replace(ds, labels=_labels_or_fail(args.labels, ds.ids))
        if ds.labels is None:
            raise ValidationError("ablation needs true labels (--labels or a label column)")
        _check_labels(ds.labels)
        if args.out:
            _check_writable_file(args.out)
        try:
            full, ablated = ablation_compare(ds, hyper, cfg, n_chains=s["chains"])
        except ChainError as exc:
            print(f"error: chain aborted: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        result = {"full": full.to_dict(), "ablated": ablated.to_dict()}
    else:
        model = _load_model_checked(args.model)
        ids, X, labels = _read_query(args.instances)
        if args.labels:
            _require_file(args.labels, "labels")
            labels = _labels_or_fail(args.labels, ids)
        if labels is None:
            raise ValidationError("eval needs true labels (--labels or a label column)")
        _check_labels(labels)
        if X.shape[1] != model.dim:
            raise ValidationError(f"instances have {X.shape[1]} features, model expects {model.dim}")
        if args.out:
            _check_writable_file(args.out)
        result = evaluate_model(model, X, labels).to_dict()
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _labels_or_fail(path, ids):
    try:
        return load_labels(path, ids)
    except DatasetFormatError as exc:
        raise ValidationError(str(exc)) from None


def _check_labels(labels):
    labels = np.asarray(labels)
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    if labels.min() == labels.max():
        raise ValidationError("AUC is undefined: labels contain a single class")


# --------------------------------------------------------------------------


def _add_training_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file (flags override it)")
    g = p.add_argument_group("model")
    g.add_argument("--kernel", choices=["gaussian", "sigmoidal"])
    g.add_argument("--sigma", type=float, help="gaussian bandwidth (default 1)")
    g.add_argument("--kappa", type=float, help="sigmoidal slope (default 1)")
    g.add_argument("--theta", type=float, help="sigmoidal offset (default 0)")
    g.add_argument("--a", type=float, help="selection prior a (default 1)")
    g.add_argument("--b", type=float, help="selection prior b (default 1)")
    g.add_argument("--mu", type=float, help="delta2 prior mu (default 1)")
    g.add_argument("--nu", type=float, help="delta2 prior nu (default 1)")
    g.add_argument("--chi", type=float, help="global confidence (default 1000)")
    g.add_argument("--delta2-shape-rule", dest="delta2_shape_rule", choices=["derived", "shifted"])
    c = p.add_argument_group("chain")
    c.add_argument("--burn-in", dest="burn_in", type=int, help="default 1000")
    c.add_argument("--n-samples", dest="n_samples", type=int, help="default 1000")
    c.add_argument("--thin", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--gamma-sweeps", dest="gamma_sweeps", type=int)
    c.add_argument("--z-steps", dest="z_steps", type=int)
    c.add_argument("--chains", type=int, help="independent chains run concurrently")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupstat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic benchmark dataset")
    p.add_argument("name", choices=["a", "b"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory (instances.csv, groups.csv, labels.csv)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="sample the posterior and write model.jsonl + report.json")
    p.add_argument("--instances")
    p.add_argument("--groups")
    p.add_argument("--out", help="output directory (default .)")
    _add_training_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-instance probabilities or a 2-D probability grid")
    p.add_argument("--model", required=True)
    p.add_argument("--instances")
    p.add_argument("--grid", nargs=3, type=float, metavar=("LO", "HI", "RES"),
                   help="RES x RES cell-centre grid over [LO, HI]^2, rows by second feature")
    p.add_argument("--pgm", help="also write the grid as an 8-bit PGM image")
    p.add_argument("--out", help="output CSV (default scores.csv or grid.csv)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="AUC and sparsity of a model", epilog=EVAL_KEYS_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--model")
    p.add_argument("--instances", required=True)
    p.add_argument("--labels", help="id,label file (else a label column is required)")
    p.add_argument("--ablation", action="store_true",
                   help="train full-fraction and ablated models and compare (needs --groups)")
    p.add_argument("--groups")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    _add_training_options(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and not args.ablation and not args.model:
        parser.error("eval needs --model unless --ablation is given")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ChainError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
