"""Training loops: normal/ADT training, clean training, finetuning and warm-up.

Every loop follows the same mini-batch recipe: take the next slice of a
shuffled epoch permutation of positives, sample negatives, predict, turn the
predictions into per-example CE weights (CE, T-CE or R-CE) and take one Adam
step. ``T`` counts mini-batches; iteration ``T`` (1-based) uses the drop rate
of ``T - 1`` so the first batch is never truncated.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .data import Dataset
from .data import sample_negatives
from .denoise import STRATEGIES, DropRateSchedule, batch_weights, ce_loss
from .model import AdamState, Model, adam_step, check_finite, clip_prob, init_params, sigmoid

logger = logging.getLogger(__name__)

# independent RNG streams derived from one seed
_SAMPLING, _PROBE, _WARMUP, _FINETUNE = 1, 2, 3, 4


@dataclass(frozen=True)
class TrainConfig:
    model: str = "gmf"
    factors: int = 32
    layers: tuple = (64, 32, 16)
    hidden: int = 200
    corruption: float = 0.5
    strategy: str = "CE"
    epsilon_max: float = 0.2
    epsilon_n: float = 5000
    beta: float = 0.25
    lr: float = 0.001
    batch_size: int = 1024
    neg_ratio: int = 1
    max_iter: int | None = 10_000  # None: one epoch over the positives
    seed: int = 0
    log_every: int = 1  # epochs between loss-group rows, 0 disables
    probe_size: int = 10_000
    patience: int = 0  # >0 enables early stopping on validation recall
    eval_k: int = 20

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_iter is not None and self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")

    @property
    def schedule(self) -> DropRateSchedule:
        return DropRateSchedule.from_epsilon_n(self.epsilon_max, self.epsilon_n)

    def dims(self, dataset: Dataset) -> dict:
        d = {"n_users": dataset.n_users, "n_items": dataset.n_items}
        if self.model == "cdae":
            d.update(hidden=self.hidden, corruption=self.corruption)
        else:
            d["factors"] = self.factors
            if self.model == "neumf":
                d["layers"] = tuple(self.layers)
        return d


@dataclass
class LossCurveLog:
    """Mean raw CE loss per probe group, one row per logged epoch."""

    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "tp_mean", "fp_mean", "pos_mean", "neg_mean")

    def append(self, epoch: int, row: dict) -> None:
        self.rows.append({"epoch": epoch, **row})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], float)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.COLUMNS[1:]])


@dataclass
class DropLog:
    """Per-iteration truncation record of a T-CE run (indices into ``dataset.train``)."""

    epoch: list = field(default_factory=list)
    epsilon: list = field(default_factory=list)
    batch: list = field(default_factory=list)
    dropped: list = field(default_factory=list)

    def append(self, epoch, epsilon, batch_index, dropped_index):
        self.epoch.append(epoch)
        self.epsilon.append(epsilon)
        self.batch.append(batch_index)
        self.dropped.append(dropped_index)

    def __len__(self):
        return len(self.epoch)


@dataclass
class TrainResult:
    model: Model
    log: LossCurveLog
    drop_log: DropLog
    iterations: int = 0
    best_epoch: int | None = None


@dataclass(frozen=True, eq=False)
class LossProbe:
    """Fixed probe pairs per group for cheap loss-curve logging."""

    tp: tuple
    fp: tuple
    pos: tuple
    neg: tuple


def make_probe(dataset: Dataset, size: int = 10_000, seed: int = 0) -> LossProbe:
    rng = np.random.default_rng([seed, _PROBE])
    train = dataset.train

    def pick(index):
        if len(index) > size:
            index = np.sort(rng.choice(index, size=size, replace=False))
        return train.users[index], train.items[index]

    tp = pick(np.flatnonzero(train.noise == 1))
    fp = pick(np.flatnonzero(train.noise == 0))
    pos = pick(np.arange(len(train)))
    n_neg = min(size, len(train))
    neg = sample_negatives(rng.integers(len(train), size=n_neg), dataset, 1, rng)
    return LossProbe(tp, fp, pos, (neg.neg_users, neg.neg_items))


def record_loss_groups(model: Model, dataset: Dataset, probe: LossProbe | None = None) -> dict:
    """Mean raw CE loss of true positives, false positives, all positives and negatives."""
    if not dataset.train.has_flags:
        raise ValueError("loss groups need noise flags on the train partition")
    probe = probe or make_probe(dataset)

    def mean_loss(pairs, label):
        users, items = pairs
        if len(users) == 0:
            return float("nan")
        return float(ce_loss(model.predict(users, items), label).mean())

    return {
        "tp_mean": mean_loss(probe.tp, 1),
        "fp_mean": mean_loss(probe.fp, 1),
        "pos_mean": mean_loss(probe.pos, 1),
        "neg_mean": mean_loss(probe.neg, 0),
    }


def user_item_matrix(dataset: Dataset) -> sp.csr_matrix:
    t = dataset.train
    m = sp.csr_matrix((np.ones(len(t)), (t.users, t.items)), shape=(dataset.n_users, dataset.n_items))
    m.sum_duplicates()
    m.data[:] = 1.0
    return m


def new_model(dataset: Dataset, config: TrainConfig) -> Model:
    user_items = user_item_matrix(dataset) if config.model == "cdae" else None
    return init_params(config.model, config.dims(dataset), config.seed, user_items=user_items)


def _fit(
    model: Model,
    dataset: Dataset,
    pool: np.ndarray,
    config: TrainConfig,
    n_iter: int,
    rng: np.random.Generator,
    probe: LossProbe | None = None,
    drop_log: DropLog | None = None,
    log: LossCurveLog | None = None,
):
    """Run ``n_iter`` Adam steps over batches drawn from ``pool`` (train indices)."""
    adam = AdamState(lr=config.lr)
    schedule = config.schedule if config.strategy == "T-CE" else None
    best = (-np.inf, None, None)
    stale = 0
    epoch, perm, cursor = 0, rng.permutation(pool), 0
    for T in range(n_iter):
        if cursor >= len(perm):
            epoch += 1
            perm, cursor = rng.permutation(pool), 0
            stop, best, stale = _end_epoch(model, dataset, config, epoch, probe, log, best, stale)
            if stop:
                break
        idx = perm[cursor : cursor + config.batch_size]
        cursor += len(idx)

        batch = sample_negatives(idx, dataset, config.neg_ratio, rng)
        labels = batch.labels
        logits, cache = model.forward(batch.users, batch.items, rng)
        probs = sigmoid(logits)
        weights = batch_weights(config.strategy, clip_prob(probs), labels, T, schedule, config.beta)
        loss = float(np.sum(weights * ce_loss(probs, labels)))
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at iteration {T + 1}")
        grads = model.backward(cache, weights * (probs - labels))
        check_finite(grads)
        adam_step(adam, model, grads)

        if drop_log is not None and schedule is not None:
            dropped = idx[weights[: batch.n_pos] == 0]
            drop_log.append(epoch + 1, schedule(T), idx, dropped)
    else:
        if n_iter and cursor >= len(perm):
            _, best, stale = _end_epoch(model, dataset, config, epoch + 1, probe, log, best, stale)
    if best[1] is not None:
        model.params = best[1]
        return best[2]
    return None


def _end_epoch(model, dataset, config, epoch, probe, log, best, stale):
    if log is not None and probe is not None and config.log_every and epoch % config.log_every == 0:
        log.append(epoch, record_loss_groups(model, dataset, probe))
    if config.patience <= 0:
        return False, best, stale
    from .evaluation import evaluate

    score = evaluate(model, dataset, (config.eval_k,), partition="valid").metrics[f"recall@{config.eval_k}"]
    if score > best[0]:
        return False, (score, {k: v.copy() for k, v in model.params.items()}, epoch), 0
    stale += 1
    return stale >= config.patience, best, stale


def _epoch_iters(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train(dataset: Dataset, config: TrainConfig, init: Model | None = None) -> TrainResult:
    """Normal (CE) or adaptive denoising (T-CE / R-CE) training on the train partition.

    ``init`` starts from a copy of an existing model instead of a fresh one.
    """
    if len(dataset.train) == 0:
        raise ValueError("empty train partition")
    model = new_model(dataset, config) if init is None else init.copy()
    pool = np.arange(len(dataset.train))
    n_iter = _epoch_iters(len(pool), config.batch_size) if config.max_iter is None else config.max_iter
    if n_iter < 1:
        raise ValueError("max_iter must be >= 1 for training")
    rng = np.random.default_rng([config.seed, _SAMPLING])
    flagged = dataset.train.has_flags and config.log_every > 0
    probe = make_probe(dataset, config.probe_size, config.seed) if flagged else None
    log, drop_log = LossCurveLog(), DropLog()
    best_epoch = _fit(model, dataset, pool, config, n_iter, rng, probe, drop_log, log)
    logger.info("trained %s/%s for %d iterations", config.model, config.strategy, n_iter)
    return TrainResult(model, log, drop_log, n_iter, best_epoch)


def train_clean(dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Plain CE training after discarding every flagged false positive."""
    if not dataset.train.has_flags:
        raise ValueError("clean training needs noise flags")
    clean = dataset.train.take(dataset.train.noise == 1)
    if len(clean) == 0:
        raise ValueError("no clean positives to train on")
    return train(dataset.with_train(clean), replace(config, strategy="CE"))


def _extra_pool(dataset: Dataset) -> np.ndarray:
    pool = dataset.extra_index()
    if len(pool) == 0:
        raise ValueError("dataset has no extra-feedback records")
    return pool


def _fit_extra(model, dataset, config, stream):
    pool = _extra_pool(dataset)
    n_iter = _epoch_iters(len(pool), config.batch_size) if config.max_iter is None else config.max_iter
    rng = np.random.default_rng([config.seed, stream])
    _fit(model, dataset, pool, replace(config, strategy="CE", patience=0), n_iter, rng)
    return model


def finetune(model: Model, dataset: Dataset, config: TrainConfig) -> Model:
    """Continue CE training on the extra-feedback positives only.

    Negatives still avoid the user's full implicit positive set.
    ``config.max_iter`` sets the number of steps (None: one epoch over them).
    """
    return _fit_extra(model.copy(), dataset, config, _FINETUNE)


def warmup_then_train(
    dataset: Dataset, warmup_config: TrainConfig, adt_config: TrainConfig
) -> tuple[Model, TrainResult]:
    """Warm up on extra feedback, then run ADT from the warmed-up weights.

    Returns the warm-up snapshot (kept untouched) and the ADT result.
    """
    model = new_model(dataset, adt_config)
    warm = _fit_extra(model, dataset, warmup_config, _WARMUP)
    return warm, train(dataset, adt_config, init=warm)
