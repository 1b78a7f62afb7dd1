"""Implicit-feedback datasets: loading, splitting, synthesis, noise injection and batching.

Interactions are stored column-wise in :class:`Interactions`; only observed
positives are kept and negatives are drawn on the fly by :func:`sample_negatives`.
A noise flag of 1 marks a true positive, 0 a false positive and -1 "unknown".
"""
from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN = -1

# value thresholds below which an interaction counts as a false positive
THRESHOLDS = {"rating": 3.0, "dwell": 10.0}


class DataFormatError(ValueError):
    """Raised when an interaction file cannot be parsed."""


@dataclass(frozen=True)
class InteractionRecord:
    user: int
    item: int
    observed: int = 1
    noise_flag: int | None = None
    extra: bool = False


@dataclass(frozen=True, eq=False)
class Interactions:
    """Column store of observed (user, item) positives."""

    users: np.ndarray
    items: np.ndarray
    noise: np.ndarray
    extra: np.ndarray

    def __post_init__(self):
        n = len(self.users)
        if not (len(self.items) == len(self.noise) == len(self.extra) == n):
            raise ValueError("interaction columns have different lengths")

    @classmethod
    def from_arrays(cls, users, items, noise=None, extra=None) -> "Interactions":
        users = np.asarray(users, dtype=np.int64).reshape(-1)
        items = np.asarray(items, dtype=np.int64).reshape(-1)
        n = len(users)
        noise = np.full(n, UNKNOWN, np.int8) if noise is None else np.asarray(noise, np.int8).reshape(-1)
        extra = np.zeros(n, bool) if extra is None else np.asarray(extra, bool).reshape(-1)
        return cls(users, items, noise, extra)

    @classmethod
    def empty(cls) -> "Interactions":
        return cls.from_arrays([], [])

    @classmethod
    def from_records(cls, records: Sequence[InteractionRecord]) -> "Interactions":
        return cls.from_arrays(
            [r.user for r in records],
            [r.item for r in records],
            [UNKNOWN if r.noise_flag is None else r.noise_flag for r in records],
            [r.extra for r in records],
        )

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[InteractionRecord]:
        for u, i, f, e in zip(self.users, self.items, self.noise, self.extra):
            yield InteractionRecord(int(u), int(i), 1, None if f == UNKNOWN else int(f), bool(e))

    @property
    def has_flags(self) -> bool:
        return bool(np.all(self.noise != UNKNOWN))

    def take(self, index) -> "Interactions":
        return Interactions(self.users[index], self.items[index], self.noise[index], self.extra[index])

    def keys(self, n_items: int) -> np.ndarray:
        return self.users * n_items + self.items

    def concat(self, other: "Interactions") -> "Interactions":
        return Interactions(
            np.concatenate([self.users, other.users]),
            np.concatenate([self.items, other.items]),
            np.concatenate([self.noise, other.noise]),
            np.concatenate([self.extra, other.extra]),
        )

    def equals(self, other: "Interactions") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in [
                (self.users, other.users),
                (self.items, other.items),
                (self.noise, other.noise),
                (self.extra, other.extra),
            ]
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Train/validation/clean-test partitions over a fixed user and item universe."""

    n_users: int
    n_items: int
    train: Interactions
    valid: Interactions = field(default_factory=Interactions.empty)
    test: Interactions = field(default_factory=Interactions.empty)
    user_ids: tuple | None = None
    item_ids: tuple | None = None

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            part = getattr(self, name)
            if len(part) and (
                part.users.min() < 0
                or part.users.max() >= self.n_users
                or part.items.min() < 0
                or part.items.max() >= self.n_items
            ):
                raise ValueError(f"{name} partition has out-of-range indices")
            bad = part.extra & (part.noise == 0)
            if bad.any():
                raise ValueError(f"{name} partition marks false positives as extra feedback")

    @cached_property
    def train_keys(self) -> np.ndarray:
        """Sorted pair keys ``user * n_items + item`` of the training positives."""
        return np.sort(self.train.keys(self.n_items))

    @cached_property
    def user_pos(self) -> list[np.ndarray]:
        """Per-user sorted arrays of training-positive items."""
        keys = self.train_keys
        users = keys // self.n_items
        bounds = np.searchsorted(users, np.arange(self.n_users + 1))
        items = keys % self.n_items
        return [items[bounds[u] : bounds[u + 1]] for u in range(self.n_users)]

    @cached_property
    def train_counts(self) -> np.ndarray:
        return np.bincount(self.train.users, minlength=self.n_users)

    def is_train_positive(self, users, items) -> np.ndarray:
        keys = np.asarray(users, np.int64) * self.n_items + np.asarray(items, np.int64)
        return _member(keys, self.train_keys)

    def with_train(self, train: Interactions) -> "Dataset":
        return replace(self, train=train)

    def extra_index(self) -> np.ndarray:
        """Indices of training records in the reliable extra-feedback set."""
        return np.flatnonzero(self.train.extra)


def _member(keys: np.ndarray, sorted_keys: np.ndarray) -> np.ndarray:
    if len(sorted_keys) == 0:
        return np.zeros(keys.shape, bool)
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return sorted_keys[pos] == keys


def _dense_ids(raw: list[str]) -> tuple[np.ndarray, tuple]:
    index: dict[str, int] = {}
    out = np.empty(len(raw), np.int64)
    for k, r in enumerate(raw):
        out[k] = index.setdefault(r, len(index))
    return out, tuple(index)


def load_interactions(
    path: str | os.PathLike,
    value_column: int | None = 2,
    threshold: float | str | None = "rating",
    sep: str = "\t",
) -> Dataset:
    """Read ``user<TAB>item<TAB>[value]<TAB>[timestamp]`` lines into a Dataset.

    Ids are re-indexed densely in order of first appearance. When a value column
    is present, values below ``threshold`` (a number or one of ``"rating"``,
    ``"dwell"``) flag the interaction as a false positive. Duplicate pairs keep
    their last occurrence. All records land in the train partition; use
    :func:`split_holdout` afterwards.
    """
    if isinstance(threshold, str):
        threshold = THRESHOLDS[threshold]
    users, items, values = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split(sep)
            if len(cols) < 2 or not cols[0] or not cols[1]:
                raise DataFormatError(f"{path}:{lineno}: expected at least user and item columns")
            value = None
            if value_column is not None and len(cols) > value_column and cols[value_column] != "":
                try:
                    value = float(cols[value_column])
                except ValueError:
                    raise DataFormatError(
                        f"{path}:{lineno}: cannot parse value {cols[value_column]!r}"
                    ) from None
            users.append(cols[0])
            items.append(cols[1])
            values.append(value)
    if not users:
        raise DataFormatError(f"{path}: no interactions found")

    u, user_ids = _dense_ids(users)
    i, item_ids = _dense_ids(items)
    noise = np.array(
        [UNKNOWN if v is None or threshold is None else int(v >= threshold) for v in values], np.int8
    )
    # keep the last occurrence of each (user, item) pair
    keys = u * len(item_ids) + i
    _, last_rev = np.unique(keys[::-1], return_index=True)
    keep = np.sort(len(keys) - 1 - last_rev)
    train = Interactions.from_arrays(u[keep], i[keep], noise[keep])
    return Dataset(len(user_ids), len(item_ids), train, user_ids=user_ids, item_ids=item_ids)


def write_interactions(part: Interactions, path, flags_path=None, dataset: Dataset | None = None) -> None:
    """Write a partition as TSV plus an optional ``user item noise_flag extra_flag`` sidecar."""
    uid = dataset.user_ids if dataset is not None and dataset.user_ids else None
    iid = dataset.item_ids if dataset is not None and dataset.item_ids else None

    def names(u, i):
        return (uid[u] if uid else str(u)), (iid[i] if iid else str(i))

    with open(path, "w", encoding="utf-8") as fh:
        for r in part:
            fh.write("%s\t%s\n" % names(r.user, r.item))
    if flags_path is not None:
        with open(flags_path, "w", encoding="utf-8") as fh:
            for r in part:
                flag = UNKNOWN if r.noise_flag is None else r.noise_flag
                fh.write("%s\t%s\t%d\t%d\n" % (*names(r.user, r.item), flag, int(r.extra)))


def save_dataset(dataset: Dataset, directory) -> None:
    """Write every partition as ``<name>.tsv`` and ``<name>.flags.tsv`` under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    for name in ("train", "valid", "test"):
        write_interactions(
            getattr(dataset, name),
            os.path.join(directory, f"{name}.tsv"),
            os.path.join(directory, f"{name}.flags.tsv"),
        )
    with open(os.path.join(directory, "shape.tsv"), "w", encoding="utf-8") as fh:
        fh.write(f"{dataset.n_users}\t{dataset.n_items}\n")


def load_dataset(directory) -> Dataset:
    """Inverse of :func:`save_dataset` (indices are kept as written)."""
    with open(os.path.join(directory, "shape.tsv"), encoding="utf-8") as fh:
        n_users, n_items = (int(x) for x in fh.read().split())
    parts = {}
    for name in ("train", "valid", "test"):
        rows = np.loadtxt(
            os.path.join(directory, f"{name}.flags.tsv"), dtype=np.int64, delimiter="\t", ndmin=2
        ).reshape(-1, 4)
        parts[name] = Interactions.from_arrays(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3] != 0)
    return Dataset(n_users, n_items, **parts)


def split_holdout(
    dataset: Dataset, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> Dataset:
    """Random per-user split of all records into train/validation/test.

    Users with fewer than 3 interactions go entirely to train. The test
    partition then drops every record flagged as a false positive, so it only
    measures satisfaction; train and validation keep the noisy records.
    """
    if len(ratios) != 3 or min(ratios) < 0 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    part = dataset.train.concat(dataset.valid).concat(dataset.test)
    rng = np.random.default_rng(seed)
    order = np.lexsort((rng.random(len(part)), part.users))
    users = part.users[order]
    counts = np.bincount(users, minlength=dataset.n_users)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(len(users)) - starts[users]

    n_valid = np.round(counts * ratios[1]).astype(np.int64)
    n_test = np.round(counts * ratios[2]).astype(np.int64)
    small = counts < 3
    n_valid[small] = 0
    n_test[small] = 0
    is_valid = rank < n_valid[users]
    is_test = ~is_valid & (rank < (n_valid + n_test)[users])
    is_train = ~(is_valid | is_test)

    test = part.take(order[is_test])
    test = test.take(test.noise != 0)
    if len(test) == 0:
        warnings.warn("split produced an empty clean test partition", RuntimeWarning, stacklevel=2)
    return replace(
        dataset,
        train=part.take(np.sort(order[is_train])),
        valid=part.take(np.sort(order[is_valid])),
        test=test.take(np.argsort(test.keys(dataset.n_items), kind="stable")),
    )


@dataclass(frozen=True, eq=False)
class Batch:
    """A mini-batch of observed positives plus sampled unobserved negatives."""

    pos_index: np.ndarray  # indices into dataset.train
    pos_users: np.ndarray
    pos_items: np.ndarray
    neg_users: np.ndarray
    neg_items: np.ndarray

    @property
    def users(self) -> np.ndarray:
        return np.concatenate([self.pos_users, self.neg_users])

    @property
    def items(self) -> np.ndarray:
        return np.concatenate([self.pos_items, self.neg_items])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([np.ones(len(self.pos_users)), np.zeros(len(self.neg_users))])

    @property
    def n_pos(self) -> int:
        return len(self.pos_users)

    def __len__(self) -> int:
        return len(self.pos_users) + len(self.neg_users)


def sample_negatives(
    pos_index: np.ndarray, dataset: Dataset, ratio: int, rng: np.random.Generator
) -> Batch:
    """Draw ``ratio`` uniform non-positive items per positive by rejection sampling."""
    if ratio < 1 or int(ratio) != ratio:
        raise ValueError(f"negative ratio must be an integer >= 1, got {ratio}")
    pos_index = np.asarray(pos_index, np.int64)
    pos_users = dataset.train.users[pos_index]
    pos_items = dataset.train.items[pos_index]
    if len(pos_users) and np.any(dataset.train_counts[pos_users] >= dataset.n_items):
        full = int(pos_users[dataset.train_counts[pos_users] >= dataset.n_items][0])
        raise ValueError(f"user {full} has interacted with every item; cannot sample negatives")

    neg_users = np.repeat(pos_users, int(ratio))
    neg_items = rng.integers(dataset.n_items, size=len(neg_users))
    bad = np.flatnonzero(dataset.is_train_positive(neg_users, neg_items))
    while len(bad):
        neg_items[bad] = rng.integers(dataset.n_items, size=len(bad))
        bad = bad[dataset.is_train_positive(neg_users[bad], neg_items[bad])]
    return Batch(pos_index, pos_users, pos_items, neg_users, neg_items)


def synthesize_dataset(
    n_users: int, n_items: int, latent_dim: int = 16, density: float = 0.02, seed: int = 0
) -> Dataset:
    """Plant Gaussian user/item factors and keep each user's top-scoring items.

    A pair is a true positive iff its inner product is among the user's
    ``ceil(density * n_items)`` largest. Every record lands in train with
    noise flag 1.
    """
    if not 0 < density <= 1:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    if density * n_items < 1:
        raise ValueError(f"density * n_items = {density * n_items} < 1")
    per_user = math.ceil(density * n_items - 1e-9)
    rng = np.random.default_rng(seed)
    user_f = rng.standard_normal((n_users, latent_dim))
    item_f = rng.standard_normal((n_items, latent_dim))
    scores = user_f @ item_f.T
    top = np.argsort(-scores, axis=1, kind="stable")[:, :per_user]
    top.sort(axis=1)
    users = np.repeat(np.arange(n_users), per_user)
    return Dataset(n_users, n_items, Interactions.from_arrays(users, top.reshape(-1), np.ones(len(users))))


def _occupied_keys(dataset: Dataset) -> np.ndarray:
    parts = (dataset.train, dataset.valid, dataset.test)
    return np.unique(np.concatenate([p.keys(dataset.n_items) for p in parts]))


def inject_false_positives(dataset: Dataset, rate: float, seed: int = 0) -> Dataset:
    """Add noisy train records so that they form a fraction ``rate`` of the train set.

    New records sit on pairs absent from every partition and carry noise flag 0.
    Validation and test are returned unchanged.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    n_add = math.ceil(rate * len(dataset.train) / (1 - rate) - 1e-9)
    if n_add == 0:
        return dataset
    occupied = _occupied_keys(dataset)
    n_free = dataset.n_users * dataset.n_items - len(occupied)
    if n_free < n_add:
        raise ValueError(f"need {n_add} free (user, item) pairs, only {n_free} available")

    rng = np.random.default_rng(seed)
    total = dataset.n_users * dataset.n_items
    if n_free < 4 * n_add:
        pool = np.setdiff1d(np.arange(total, dtype=np.int64), occupied, assume_unique=True)
        chosen = rng.choice(pool, size=n_add, replace=False)
    else:
        chosen = np.empty(0, np.int64)
        while len(chosen) < n_add:
            cand = rng.integers(total, size=2 * (n_add - len(chosen)))
            cand = cand[~_member(cand, occupied)]
            _, first = np.unique(np.concatenate([chosen, cand]), return_index=True)
            merged = np.concatenate([chosen, cand])[np.sort(first)]
            chosen = merged[:n_add]
    noisy = Interactions.from_arrays(
        chosen // dataset.n_items, chosen % dataset.n_items, np.zeros(n_add), np.zeros(n_add, bool)
    )
    train = dataset.train.concat(noisy)
    order = np.argsort(train.keys(dataset.n_items), kind="stable")
    logger.debug("injected %d false positives (rate %.3f)", n_add, rate)
    return dataset.with_train(train.take(order))


def reveal_extra_feedback(dataset: Dataset, fraction: float, seed: int = 0, spread: float = 0.0) -> Dataset:
    """Mark ``round(fraction * #true positives)`` train records as extra feedback.

    With ``spread = 0`` every true positive is equally likely. A positive
    ``spread`` draws a Gamma(1/spread, spread) activity level per user and
    samples records in proportion to it, so some users get dense extra
    feedback and others almost none (``spread`` is the variance of the level).
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    if spread < 0:
        raise ValueError(f"spread must be non-negative, got {spread}")
    tp = np.flatnonzero(dataset.train.noise == 1)
    rng = np.random.default_rng(seed)
    n = int(round(fraction * len(tp)))
    if spread > 0:
        level = rng.gamma(1.0 / spread, spread, size=dataset.n_users)
        p = level[dataset.train.users[tp]]
        chosen = rng.choice(tp, size=n, replace=False, p=p / p.sum())
    else:
        chosen = rng.choice(tp, size=n, replace=False)
    extra = np.zeros(len(dataset.train), bool)
    extra[chosen] = True
    return dataset.with_train(replace(dataset.train, extra=extra))
