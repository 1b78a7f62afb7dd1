"""Colliding inference for users whose extra feedback is sparse.

Neighbors are found by inner product in the user space of the warm-up model
(trained on extra feedback only); a sparse user's final scores are blended
with the final scores of those neighbors.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset
from .model import Model


@dataclass(frozen=True)
class CollidingConfig:
    lam: float = 0.8
    n_neighbors: int = 10
    ratio_threshold: float = 0.1
    weighting: str = "uniform"  # or "similarity"

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")
        if self.weighting not in ("uniform", "similarity"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True, eq=False)
class NeighborIndex:
    neighbors: np.ndarray  # (n_users, k) user indices
    weights: np.ndarray  # (n_users, k), rows sum to 1


def user_ratios(dataset: Dataset) -> np.ndarray:
    """Extra-feedback count over implicit count for every user (NaN without interactions)."""
    t = dataset.train
    implicit = np.bincount(t.users, minlength=dataset.n_users).astype(float)
    extra = np.bincount(t.users[t.extra], minlength=dataset.n_users).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(implicit > 0, extra / implicit, np.nan)


def user_ratio(dataset: Dataset, u: int) -> float:
    mask = dataset.train.users == u
    n = int(mask.sum())
    if n == 0:
        raise ValueError(f"user {u} has no implicit interactions")
    return int(dataset.train.extra[mask].sum()) / n


def top_k_inner_product(query: np.ndarray, base: np.ndarray, k: int, exclude=None):
    """Exact top-``k`` rows of ``base`` by inner product with each ``query`` row.

    ``exclude[r]`` (a base row index or -1) is never returned for query row
    ``r``. Ties go to the lower base index. Returns ``(indices, similarities)``.
    """
    sims = query @ base.T
    if exclude is not None:
        rows = np.flatnonzero(np.asarray(exclude) >= 0)
        sims[rows, np.asarray(exclude)[rows]] = -np.inf
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


def build_neighbor_index(
    warm_model: Model, config: CollidingConfig, dataset: Dataset | None = None
) -> NeighborIndex:
    """Nearest users in the warm-up representation space, self excluded.

    With ``dataset`` given, candidates are limited to users holding at least
    one extra-feedback record.
    """
    n_users = warm_model.n_users
    reps = np.stack([warm_model.user_representation(u) for u in range(n_users)])
    if dataset is not None:
        candidates = np.unique(dataset.train.users[dataset.train.extra])
    else:
        candidates = np.arange(n_users)
    k = config.n_neighbors
    # one slot of slack: a user may find itself among the candidates
    if k >= n_users or k > len(candidates) - 1:
        raise ValueError(f"n_neighbors={k} too large for {len(candidates)} candidate users")
    pos_in_cand = np.full(n_users, -1)
    pos_in_cand[candidates] = np.arange(len(candidates))
    order, sims = top_k_inner_product(reps, reps[candidates], k, exclude=pos_in_cand)
    neighbors = candidates[order]
    if config.weighting == "uniform":
        weights = np.full(neighbors.shape, 1.0 / k)
    else:
        w = np.clip(sims, 0.0, None)
        total = w.sum(axis=1, keepdims=True)
        weights = np.where(total > 0, w / np.where(total > 0, total, 1.0), 1.0 / k)
    return NeighborIndex(neighbors, weights)


def colliding_fuse(own_scores, neighbor_scores, weights, lam: float) -> np.ndarray:
    """``lam * own + (1 - lam) * sum_j w_j * neighbor_j``."""
    own = np.asarray(own_scores, float)
    nb = np.atleast_2d(np.asarray(neighbor_scores, float))
    weights = np.asarray(weights, float)
    if nb.shape[1] != own.shape[-1] or len(weights) != len(nb):
        raise ValueError("score vectors and weights do not line up")
    if lam == 1:
        return own.copy()
    return lam * own + (1.0 - lam) * (weights @ nb)


class CollidingScorer:
    """Callable scorer applying colliding inference to users below the ratio threshold.

    Scores come from the final (post-ADT) model; neighbors from ``warm_model``.
    Users at or above the threshold keep their own scores bit for bit.
    """

    def __init__(self, final_model: Model, warm_model: Model | None, dataset: Dataset, config: CollidingConfig):
        if warm_model is None:
            raise ValueError("colliding inference needs the warm-up model")
        self.model = final_model
        self.config = config
        self.index = build_neighbor_index(warm_model, config, dataset)
        ratios = user_ratios(dataset)
        self.sparse = np.nan_to_num(ratios, nan=np.inf) < config.ratio_threshold

    def __call__(self, users) -> np.ndarray:
        users = np.atleast_1d(np.asarray(users, np.int64))
        own = self.model.predict_matrix(users)
        todo = np.flatnonzero(self.sparse[users])
        if len(todo) == 0 or self.config.lam == 1:
            return own
        nbs = self.index.neighbors[users[todo]]
        nb_scores = self.model.predict_matrix(nbs.ravel()).reshape(len(todo), nbs.shape[1], -1)
        for r, t in enumerate(todo):
            own[t] = colliding_fuse(own[t], nb_scores[r], self.index.weights[users[t]], self.config.lam)
        return own


def infer_with_colliding(final_model, warm_model, dataset, config, u) -> np.ndarray:
    """Ranking scores of user ``u`` with colliding inference applied when ``u`` is sparse."""
    return CollidingScorer(final_model, warm_model, dataset, config)([u])[0]


LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(11))
NEIGHBOR_GRID = (1, 3, 5, 10, 20, 50, 100)


def tune_colliding(
    final_model: Model,
    warm_model: Model,
    dataset: Dataset,
    base: CollidingConfig = CollidingConfig(),
    lambdas=LAMBDA_GRID,
    neighbor_counts=NEIGHBOR_GRID,
    K: int = 20,
) -> tuple[CollidingConfig, dict]:
    """Pick ``lam`` and ``n_neighbors`` by validation NDCG@K over the sparse users.

    Ties favour the larger ``lam`` (less fusion), then fewer neighbors.
    Neighbor counts larger than the candidate pool are skipped. Returns the
    chosen config and a ``{(lam, k): ndcg}`` table.
    """
    from .evaluation import evaluate

    n_cand = len(np.unique(dataset.train.users[dataset.train.extra]))
    counts = sorted(k for k in set(neighbor_counts) if k < min(n_cand, final_model.n_users))
    if not counts:
        raise ValueError("no neighbor count fits the candidate pool")
    sparse = np.flatnonzero(np.nan_to_num(user_ratios(dataset), nan=np.inf) < base.ratio_threshold)
    has_valid = np.bincount(dataset.valid.users, minlength=dataset.n_users)[sparse] > 0
    sparse = sparse[has_valid]
    if len(sparse) == 0:
        raise ValueError("no sparse user has validation items")

    widest = build_neighbor_index(warm_model, replace(base, n_neighbors=counts[-1]), dataset)
    own = final_model.predict_matrix(sparse)
    lookup = np.full(dataset.n_users, -1)
    lookup[sparse] = np.arange(len(sparse))
    table = {}
    for k in counts:
        if base.weighting == "uniform":
            nb = widest.neighbors[sparse, :k]
            weights = np.full(nb.shape, 1.0 / k)
        else:
            idx = build_neighbor_index(warm_model, replace(base, n_neighbors=k), dataset)
            nb, weights = idx.neighbors[sparse], idx.weights[sparse]
        flat = final_model.predict_matrix(nb.ravel()).reshape(*nb.shape, -1)
        mix = np.einsum("uk,uki->ui", weights, flat)
        for lam in lambdas:
            fused = own if lam == 1 else lam * own + (1.0 - lam) * mix
            report = evaluate(lambda us: fused[lookup[us]], dataset, (K,), partition="valid", users=sparse)
            table[(float(lam), k)] = report.metrics[f"ndcg@{K}"]
    lam, k = max(table, key=lambda key: (table[key], key[0], -key[1]))
    return replace(base, lam=lam, n_neighbors=k), table
