"""Top-K ranking metrics, truncation diagnostics and user activity groups."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset

SKIP_POLICY = "users without clean-test positives are skipped"


def rank_items(scores, exclude=(), K: int = 20) -> np.ndarray:
    """Top-``K`` item indices by descending score, excluding ``exclude``; ties go to the lower index."""
    scores = np.asarray(scores, float)
    exclude = np.unique(np.asarray(list(exclude), np.int64))
    if K > len(scores) - len(exclude):
        raise ValueError(f"K={K} exceeds the {len(scores) - len(exclude)} rankable items")
    masked = scores.copy()
    masked[exclude] = -np.inf
    return np.argsort(-masked, kind="stable")[:K]


def recall_at_k(ranked, relevant, K: int) -> float:
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("recall needs a non-empty relevant set")
    hits = sum(1 for i in list(ranked)[:K] if int(i) in relevant)
    return hits / len(relevant)


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_at_k(ranked, relevant, K: int) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at ``min(K, |relevant|)``."""
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("NDCG needs a non-empty relevant set")
    top = list(ranked)[:K]
    gains = np.array([int(i) in relevant for i in top], float)
    dcg = float(gains @ _discounts(len(top)))
    idcg = float(_discounts(min(K, len(relevant))).sum())
    return dcg / idcg


@dataclass
class EvalReport:
    metrics: dict
    n_users: int
    n_skipped: int
    ks: tuple
    per_user: dict = field(default_factory=dict, repr=False)
    users: np.ndarray | None = field(default=None, repr=False)
    groups: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def subset(self, mask) -> dict:
        """Mean metrics over the evaluated users selected by ``mask`` (aligned with ``users``)."""
        mask = np.asarray(mask, bool)
        return {k: float(v[mask].mean()) if mask.any() else float("nan") for k, v in self.per_user.items()}

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "n_users": self.n_users,
            "n_skipped": self.n_skipped,
            "ks": list(self.ks),
            "groups": self.groups,
            "meta": {"skip_policy": SKIP_POLICY, **self.meta},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        names = sorted(self.metrics)
        lines = ["  ".join(f"{n:>12}" for n in names), "  ".join(f"{self.metrics[n]:>12.4f}" for n in names)]
        return "\n".join(lines) + "\n"


def _scorer(target) -> Callable[[np.ndarray], np.ndarray]:
    if hasattr(target, "predict_matrix"):
        return target.predict_matrix
    if callable(target):
        return target
    raise TypeError("evaluate needs a model or a callable mapping users to score rows")


def evaluate(
    target,
    dataset: Dataset,
    ks=(20,),
    partition: str = "test",
    users=None,
    groups: np.ndarray | None = None,
    chunk: int = 512,
) -> EvalReport:
    """Recall@K and NDCG@K averaged over users with at least one relevant item.

    ``target`` is a model or any callable mapping an array of users to a
    matrix of item scores. Training positives are masked out of each ranking.
    ``groups`` (an int per user) adds per-group averages to the report.
    """
    part = getattr(dataset, partition)
    if len(part) == 0:
        raise ValueError(f"empty {partition} partition")
    score_rows = _scorer(target)
    ks = tuple(sorted(set(int(k) for k in ks)))
    k_max = ks[-1]

    counts = np.bincount(part.users, minlength=dataset.n_users)
    candidates = np.arange(dataset.n_users) if users is None else np.unique(np.asarray(users, np.int64))
    n_skipped = int(np.sum(counts[candidates] == 0))
    eval_users = candidates[counts[candidates] > 0]
    if len(eval_users) == 0:
        raise ValueError(f"no user in the {partition} partition has relevant items")

    order = np.argsort(part.users, kind="stable")
    rel_items = part.items[order]
    rel_bounds = np.concatenate([[0], np.cumsum(counts)])
    per_user = {f"{m}@{k}": np.empty(len(eval_users)) for k in ks for m in ("recall", "ndcg")}
    disc = _discounts(k_max)

    for start in range(0, len(eval_users), chunk):
        block = eval_users[start : start + chunk]
        scores = np.array(score_rows(block), float)
        for r, u in enumerate(block):
            scores[r, dataset.user_pos[u]] = -np.inf
        top = np.argsort(-scores, axis=1, kind="stable")[:, :k_max]
        relevant = np.zeros(scores.shape, bool)
        for r, u in enumerate(block):
            relevant[r, rel_items[rel_bounds[u] : rel_bounds[u + 1]]] = True
        hits = np.take_along_axis(relevant, top, axis=1).astype(float)
        n_rel = counts[block]
        sl = slice(start, start + len(block))
        for k in ks:
            per_user[f"recall@{k}"][sl] = hits[:, :k].sum(axis=1) / n_rel
            ideal = np.cumsum(disc[:k])[np.minimum(n_rel, k) - 1]
            per_user[f"ndcg@{k}"][sl] = (hits[:, :k] @ disc[:k]) / ideal

    metrics = {k: float(v.mean()) for k, v in per_user.items()}
    report = EvalReport(metrics, len(eval_users), n_skipped, ks, per_user, eval_users)
    if groups is not None:
        g = np.asarray(groups)[eval_users]
        report.groups = {str(int(x)): report.subset(g == x) for x in np.unique(g)}
    return report


def drop_precision_recall(dropped, false_positives) -> tuple[float, float, bool]:
    """Set-level (recall, precision, precision_defined) of a discard decision."""
    dropped, fps = set(dropped), set(false_positives)
    hit = len(dropped & fps)
    recall = hit / len(fps) if fps else 0.0
    if not dropped:
        return recall, 0.0, False
    return recall, hit / len(dropped), True


def denoise_precision_recall(drop_log, dataset: Dataset) -> list[dict]:
    """Per-epoch recall/precision of T-CE discards against the noise flags.

    Recall is the share of false positives seen in the epoch's batches that
    were dropped; precision is the share of dropped positives that were false.
    The random-discard reference has recall equal to the mean drop rate and
    precision equal to the false-positive share of the batch stream.
    """
    noise = dataset.train.noise
    if not dataset.train.has_flags:
        raise ValueError("denoising diagnostics need noise flags")
    epochs = np.asarray(drop_log.epoch)
    rows = []
    for e in np.unique(epochs):
        its = np.flatnonzero(epochs == e)
        seen = np.concatenate([drop_log.batch[t] for t in its])
        dropped = np.concatenate([drop_log.dropped[t] for t in its])
        n_fp = int(np.sum(noise[seen] == 0))
        n_drop = len(dropped)
        n_hit = int(np.sum(noise[dropped] == 0))
        rows.append(
            {
                "epoch": int(e),
                "epsilon": float(np.mean([drop_log.epsilon[t] for t in its])),
                "n_seen": int(len(seen)),
                "n_fp": n_fp,
                "n_dropped": n_drop,
                "n_dropped_fp": n_hit,
                "recall": n_hit / n_fp if n_fp else 0.0,
                "precision": n_hit / n_drop if n_drop else 0.0,
                "precision_defined": bool(n_drop),
                "baseline_recall": float(np.mean([drop_log.epsilon[t] for t in its])),
                "baseline_precision": n_fp / len(seen) if len(seen) else 0.0,
            }
        )
    return rows


def group_users_by_activity(dataset: Dataset, n_groups: int = 4) -> np.ndarray:
    """Assign users to ``n_groups`` activity groups of roughly equal interaction mass.

    Users are sorted by train count (ties by index) and cut greedily where the
    running mass first reaches each ``g / n_groups`` share; group 0 is the least active.
    """
    if n_groups < 2:
        raise ValueError("need at least two groups")
    counts = dataset.train_counts
    n = len(counts)
    if n < n_groups:
        raise ValueError(f"{n} users cannot form {n_groups} groups")
    order = np.lexsort((np.arange(n), counts))
    cum = np.cumsum(counts[order])
    total = cum[-1]
    groups = np.empty(n, np.int64)
    start = 0
    for g in range(n_groups):
        if g == n_groups - 1:
            stop = n
        else:
            stop = int(np.searchsorted(cum, (g + 1) * total / n_groups - 1e-9)) + 1
            stop = min(max(stop, start + 1), n - (n_groups - 1 - g))
        groups[order[start:stop]] = g
        start = stop
    return groups
