"""Config-driven experiment runner and command line entry point.

A run builds one noisy synthetic (or file-backed) dataset per seed, trains
every method of the chosen template, evaluates on the clean test partition
and writes per-seed reports plus a seed-aggregated summary::

    out/
      summary.json  summary.txt
      seed_<k>/report.json  seed_<k>/loss_curve.csv  seed_<k>/drop_diag.csv
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .colliding import CollidingConfig, CollidingScorer, tune_colliding, user_ratios
from .data import (
    inject_false_positives,
    load_interactions,
    reveal_extra_feedback,
    split_holdout,
    synthesize_dataset,
)
from .denoise import STRATEGIES
from .evaluation import SKIP_POLICY, EvalReport, denoise_precision_recall, evaluate
from .train import TrainConfig, finetune, train, train_clean, warmup_then_train

logger = logging.getLogger(__name__)

EPSILON_MAX_GRID = (0.05, 0.1, 0.2)
BETA_GRID = (0.05, 0.1, 0.15, 0.2, 0.25, 0.5, 1.0)
MODELS = ("gmf", "neumf", "cdae")

# method names per template; "{s}" is the configured ADT strategy
TEMPLATES = {
    "clean-vs-normal": ("clean", "normal"),
    "adt-compare": ("CE", "T-CE", "R-CE"),
    "extra-feedback": ("{s}", "finetune+{s}", "warm-up+{s}"),
    "colliding": ("warm-up+{s}", "warm-up+{s}+colliding"),
}
EXTRA_STRATEGIES = {"none": "{s}", "finetune": "finetune+{s}", "warm-up": "warm-up+{s}",
                    "warm-up+colliding": "warm-up+{s}+colliding"}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    # data: a file path, or the synthetic generator below
    data_path: str | None = None
    threshold: str | None = "rating"
    n_users: int = 2000
    n_items: int = 1000
    latent_dim: int = 16
    density: float = 0.02
    noise_rate: float = 0.3
    split: tuple = (0.8, 0.1, 0.1)
    extra_fraction: float = 0.1
    # model and ADT
    model: str = "gmf"
    factors: int = 32
    strategy: str = "T-CE"
    epsilon_max: float = 0.2
    epsilon_n: float = 600
    beta: float = 1.0
    lr: float = 0.005
    batch_size: int = 1024
    neg_ratio: int = 1
    max_iter: int = 3000
    # extra feedback
    extra: str = "none"
    warmup_iter: int = 30
    warmup_lr: float = 0.001
    finetune_iter: int = 12
    # colliding; lam/neighbors left unset are picked on the validation set
    lam: float | None = None
    neighbors: int | None = None
    ratio_threshold: float = 0.1
    # run
    template: str | None = None
    ks: tuple = (20,)
    seeds: tuple = (0, 1, 2)
    out: str = "runs"
    off_grid: bool = False  # allow epsilon_max / beta outside the documented grids

    def __post_init__(self):
        if self.strategy not in STRATEGIES or self.strategy == "CE" and self.template in ("extra-feedback", "colliding"):
            raise ValueError(f"unknown or unusable strategy {self.strategy!r}; expected T-CE or R-CE")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.template is not None and self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}; expected one of {tuple(TEMPLATES)}")
        if self.extra not in EXTRA_STRATEGIES:
            raise ValueError(f"unknown extra-feedback strategy {self.extra!r}")
        if not self.off_grid:
            if self.epsilon_max not in EPSILON_MAX_GRID:
                raise ValueError(f"epsilon_max {self.epsilon_max} not in {EPSILON_MAX_GRID} (set off_grid to allow)")
            if self.beta not in BETA_GRID:
                raise ValueError(f"beta {self.beta} not in {BETA_GRID} (set off_grid to allow)")
        if self.data_path is not None and not Path(self.data_path).is_file():
            raise ValueError(f"data file {self.data_path} does not exist")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.lam is not None:
            CollidingConfig(lam=self.lam)
        if self.neighbors is not None and self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")

    @property
    def methods(self) -> tuple:
        names = TEMPLATES[self.template] if self.template else (EXTRA_STRATEGIES[self.extra],)
        return tuple(n.format(s=self.strategy) for n in names)

    def train_config(self, seed: int, strategy: str = "CE") -> TrainConfig:
        return TrainConfig(
            model=self.model, factors=self.factors, strategy=strategy, epsilon_max=self.epsilon_max,
            epsilon_n=self.epsilon_n, beta=self.beta, lr=self.lr, batch_size=self.batch_size,
            neg_ratio=self.neg_ratio, max_iter=self.max_iter, seed=seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(name: str, text: str, default):
    text = text.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        kind = float if name == "split" else int
        return tuple(kind(x) for x in text.replace(",", " ").split())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or name in ("lam", "ratio_threshold"):
        return float(text)
    if name == "neighbors":
        return int(text)
    return text


def read_config(path) -> dict:
    """Parse a ``key = value`` file (``#`` comments) into ExperimentConfig keyword arguments."""
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.read_string("[experiment]\n" + text, source=str(path))
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    out = {}
    for key, value in parser["experiment"].items():
        name = key.replace("-", "_")
        if name not in defaults:
            raise ValueError(f"{path}: unknown key {key!r}")
        out[name] = _coerce(name, value, defaults[name])
    return out


@dataclass
class SeedResult:
    seed: int
    reports: dict  # method -> EvalReport
    loss_curves: dict = field(default_factory=dict)  # method -> LossCurveLog
    drop_diag: dict = field(default_factory=dict)  # method -> list of rows
    extras: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def build_dataset(config: ExperimentConfig, seed: int):
    if config.data_path is not None:
        base = load_interactions(config.data_path, threshold=config.threshold)
        ds = split_holdout(base, config.split, seed)
    else:
        base = synthesize_dataset(config.n_users, config.n_items, config.latent_dim, config.density, seed)
        ds = inject_false_positives(split_holdout(base, config.split, seed), config.noise_rate, seed)
    if config.extra_fraction > 0:
        ds = reveal_extra_feedback(ds, config.extra_fraction, seed)
    return ds


def run_seed(config: ExperimentConfig, seed: int, methods=None, keep_models: bool = False) -> SeedResult:
    """Train and evaluate ``methods`` (default: the config's) on one seed's dataset."""
    methods = tuple(methods or config.methods)
    ds = _stage("data", build_dataset, config, seed)
    s = config.strategy
    ratios = user_ratios(ds)
    sparse = (np.nan_to_num(ratios, nan=np.inf) < config.ratio_threshold).astype(int)
    result = SeedResult(seed, {})
    runs = {}  # trained TrainResult / model cache shared between methods

    def fit(name):
        if name in runs:
            return runs[name]
        if name == "clean":
            runs[name] = train_clean(ds, config.train_config(seed))
        elif name in ("normal", "CE", "T-CE", "R-CE"):
            runs[name] = train(ds, config.train_config(seed, "CE" if name == "normal" else name))
        elif name == f"finetune+{s}":
            ft = replace(config.train_config(seed, s), max_iter=config.finetune_iter)
            base = fit(s)
            runs[name] = replace(base, model=finetune(base.model, ds, ft))
        elif name == f"warm-up+{s}":
            wu = replace(config.train_config(seed), lr=config.warmup_lr, max_iter=config.warmup_iter)
            warm, res = warmup_then_train(ds, wu, config.train_config(seed, s))
            runs["warm"] = warm
            runs[name] = res
        else:
            raise ValueError(f"unknown method {name!r}")
        return runs[name]

    for name in methods:
        if name.endswith("+colliding"):
            base_name = name[: -len("+colliding")]
            res = _stage(f"train:{base_name}", fit, base_name)
            coll = CollidingConfig(
                lam=0.0 if config.lam is None else config.lam,
                n_neighbors=1 if config.neighbors is None else config.neighbors,
                ratio_threshold=config.ratio_threshold,
            )
            if config.lam is None or config.neighbors is None:
                lams = (config.lam,) if config.lam is not None else None
                ks = (config.neighbors,) if config.neighbors is not None else None
                kw = {k: v for k, v in (("lambdas", lams), ("neighbor_counts", ks)) if v is not None}
                coll, _ = _stage("tune:colliding", tune_colliding, res.model, runs["warm"], ds, coll, **kw)
            result.extras["colliding"] = {"lambda": coll.lam, "neighbors": coll.n_neighbors,
                                          "ratio_threshold": coll.ratio_threshold,
                                          "n_sparse_users": int(sparse.sum())}
            target = _stage("colliding", CollidingScorer, res.model, runs["warm"], ds, coll)
        else:
            res = _stage(f"train:{name}", fit, name)
            target = res.model
        report = _stage(f"evaluate:{name}", evaluate, target, ds, config.ks, groups=sparse)
        # group "1" holds the sparse users (extra/implicit ratio below the threshold)
        report.groups = {("sparse" if g == "1" else "dense"): v for g, v in report.groups.items()}
        result.reports[name] = report
        if res.log.rows:
            result.loss_curves[name] = res.log
        if len(res.drop_log):
            result.drop_diag[name] = denoise_precision_recall(res.drop_log, ds)
        if keep_models:
            result.models[name] = target
    if keep_models:
        result.models["_warm"] = runs.get("warm")
        result.models["_runs"] = runs
        result.models["_dataset"] = ds
    return result


def write_seed(result: SeedResult, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    payload = {"seed": result.seed, "methods": {m: r.to_dict() for m, r in result.reports.items()},
               "extras": result.extras}
    (d / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(d / "loss_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        cols = ("epoch", "tp_mean", "fp_mean", "pos_mean", "neg_mean")
        w.writerow(("method",) + cols)
        for m, log in result.loss_curves.items():
            for r in log.rows:
                w.writerow([m, r["epoch"]] + [repr(float(r[c])) for c in cols[1:]])
    cols = ("epoch", "epsilon", "n_seen", "n_fp", "n_dropped", "n_dropped_fp", "recall", "precision",
            "precision_defined", "baseline_recall", "baseline_precision")
    with open(d / "drop_diag.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method",) + cols)
        for m, rows in result.drop_diag.items():
            for r in rows:
                w.writerow([m] + [repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def _aggregate(values) -> dict:
    v = np.asarray(values, float)
    std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return {"mean": float(v.mean()), "std": std, "se": std / math.sqrt(len(v)), "per_seed": [float(x) for x in v]}


def summarize(results: list[SeedResult]) -> list[dict]:
    if not results:
        raise ValueError("no seed results to summarize")
    rows = []
    for method in results[0].reports:
        reports: list[EvalReport] = [r.reports[method] for r in results]
        metrics = {k: _aggregate([rep.metrics[k] for rep in reports]) for k in sorted(reports[0].metrics)}
        groups = {}
        for g in sorted(reports[0].groups):
            groups[g] = {k: _aggregate([rep.groups.get(g, {}).get(k, float("nan")) for rep in reports])
                         for k in sorted(reports[0].groups[g])}
        rows.append({"method": method, "metrics": metrics, "groups": groups})
    return rows


def emit_report(results: list[SeedResult], path, config: ExperimentConfig | None = None) -> None:
    """Write ``summary.json`` and ``summary.txt`` for a list of per-seed results."""
    if not results:
        raise ValueError("empty report list")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    rows = summarize(results)
    summary = {
        "config": config.to_dict() if config is not None else None,
        "seeds": [r.seed for r in results],
        "skip_policy": SKIP_POLICY,
        "rows": rows,
        "extras": {str(r.seed): r.extras for r in results},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "summary.txt").write_text(summary_text(rows, len(results)), encoding="utf-8")


def summary_text(rows: list[dict], n_seeds: int) -> str:
    names = list(rows[0]["metrics"])
    width = max(len("method"), *(len(r["method"]) for r in rows))
    head = f"{'method':<{width}}  " + "  ".join(f"{n:>18}" for n in names)
    lines = [f"mean +- std over {n_seeds} seed(s); clean test partition", head, "-" * len(head)]
    for r in rows:
        cells = [f"{r['metrics'][n]['mean']:.4f} +- {r['metrics'][n]['std']:.4f}" for n in names]
        lines.append(f"{r['method']:<{width}}  " + "  ".join(f"{c:>18}" for c in cells))
    for g in sorted(rows[0]["groups"]):
        lines.append(f"\n[{g} users]")
        for r in rows:
            m = r["groups"][g]
            cells = [f"{m[n]['mean']:.4f} +- {m[n]['std']:.4f}" for n in names]
            lines.append(f"{r['method']:<{width}}  " + "  ".join(f"{c:>18}" for c in cells))
    return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig) -> int:
    """Run every seed, write artifacts under ``config.out``; 0 on success, 1 on a failed stage."""
    out = Path(config.out)
    results = []
    try:
        for seed in config.seeds:
            logger.info("seed %d: %s", seed, ", ".join(config.methods))
            res = run_seed(config, seed)
            _stage("emit", write_seed, res, out / f"seed_{seed}")
            results.append(res)
        _stage("emit", emit_report, results, out, config)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adtrec", description="Denoising-recommender experiments at desk scale.")
    p.add_argument("--config", help="key = value file; flags override its keys")
    p.add_argument("--template", choices=tuple(TEMPLATES))
    p.add_argument("--seeds", type=int, help="run seeds 0..N-1")
    p.add_argument("--out", help="output directory")
    p.add_argument("--strategy", help="ADT strategy for extra-feedback runs (T-CE or R-CE)")
    p.add_argument("--model", choices=MODELS)
    p.add_argument("--extra", choices=tuple(EXTRA_STRATEGIES))
    p.add_argument("--epsilon-max", type=float)
    p.add_argument("--epsilon-n", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--neighbors", type=int)
    p.add_argument("--ratio-threshold", type=float)
    p.add_argument("--off-grid", action="store_true", default=None, help="allow hyperparameters off the grids")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    kw = {}
    if args.config:
        try:
            kw.update(read_config(args.config))
        except (OSError, ValueError, configparser.Error) as exc:
            parser.error(f"bad config: {exc}")
    flags = vars(args)
    for name in ("template", "out", "strategy", "model", "extra", "epsilon_max", "epsilon_n", "beta", "lam",
                 "neighbors", "ratio_threshold", "off_grid"):
        if flags[name] is not None:
            kw[name] = flags[name]
    if args.seeds is not None:
        if args.seeds < 1:
            parser.error("--seeds must be >= 1")
        kw["seeds"] = tuple(range(args.seeds))
    try:
        config = ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        parser.error(str(exc))
    return run_experiment(config)


if __name__ == "__main__":
    sys.exit(main())
