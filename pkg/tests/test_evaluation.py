import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adtrec.evaluation import (
    SKIP_POLICY,
    denoise_precision_recall,
    drop_precision_recall,
    evaluate,
    group_users_by_activity,
    ndcg_at_k,
    rank_items,
    recall_at_k,
)
from adtrec.train import DropLog

from conftest import make_dataset


def oracle_dcg(order, relevant, K):
    return sum(1.0 / math.log2(pos + 2) for pos, i in enumerate(order[:K]) if i in relevant)


def oracle_ideal(n_items, relevant, K):
    """Best achievable DCG, found by trying every permutation."""
    return max(oracle_dcg(list(p), relevant, K) for p in itertools.permutations(range(n_items)))


def all_instances(max_items=5, max_rel=3):
    for n in range(1, max_items + 1):
        for r in range(1, min(max_rel, n) + 1):
            for relevant in itertools.combinations(range(n), r):
                for order in itertools.permutations(range(n)):
                    for K in range(1, n + 1):
                        yield n, set(relevant), list(order), K


def test_metrics_match_exhaustive_oracle():
    ideal_cache = {}
    count = 0
    for n, relevant, order, K in all_instances():
        key = (n, len(relevant), K)
        if key not in ideal_cache:
            # the ideal only depends on how many items are relevant, not which
            ideal_cache[key] = oracle_ideal(n, set(range(len(relevant))), K)
        hits = sum(1 for i in order[:K] if i in relevant)
        assert recall_at_k(order, relevant, K) == hits / len(relevant)
        expected = oracle_dcg(order, relevant, K) / ideal_cache[key]
        assert ndcg_at_k(order, relevant, K) == pytest.approx(expected, abs=1e-12)
        count += 1
    assert count > 10_000


class TestRank:
    def test_forced_order(self):
        assert rank_items([0.9, 0.1, 0.5], exclude={0}, K=2).tolist() == [2, 1]

    def test_full_permutation(self):
        assert sorted(rank_items([0.3, 0.1, 0.2, 0.4], K=4).tolist()) == [0, 1, 2, 3]

    def test_ties_lower_index(self):
        assert rank_items([0.5, 0.7, 0.5, 0.5], K=3).tolist() == [1, 0, 2]

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            rank_items([0.1, 0.2], exclude={0}, K=2)

    @given(scores=st.lists(st.floats(-5, 5), min_size=3, max_size=12), data=st.data())
    def test_exclusions_never_ranked(self, scores, data):
        ex = data.draw(st.sets(st.integers(0, len(scores) - 1), max_size=len(scores) - 1))
        ranked = rank_items(scores, ex, K=len(scores) - len(ex))
        assert not set(ranked.tolist()) & ex


class TestMetrics:
    def test_recall_half(self):
        assert recall_at_k([0, 5, 1, 7], {0, 1, 2, 3}, 4) == 0.5

    def test_recall_all_first(self):
        assert recall_at_k([2, 3, 0], {2, 3}, 2) == 1.0

    def test_ndcg_first(self):
        assert ndcg_at_k([4, 0, 1], {4}, 3) == 1.0

    def test_ndcg_none(self):
        assert ndcg_at_k([0, 1], {5}, 2) == 0.0

    def test_ndcg_second(self):
        assert ndcg_at_k([0, 4], {4}, 2) == pytest.approx(1 / math.log2(3))
        assert ndcg_at_k([0, 4], {4}, 2) == pytest.approx(0.6309, abs=1e-4)

    def test_empty_relevant(self):
        with pytest.raises(ValueError):
            recall_at_k([0], set(), 1)
        with pytest.raises(ValueError):
            ndcg_at_k([0], set(), 1)

    @settings(max_examples=100)
    @given(data=st.data())
    def test_ndcg_one_iff_top_slots_relevant(self, data):
        n = data.draw(st.integers(2, 8))
        order = data.draw(st.permutations(range(n)))
        relevant = data.draw(st.sets(st.integers(0, n - 1), min_size=1))
        K = data.draw(st.integers(1, n))
        full = all(i in relevant for i in order[: min(K, len(relevant))])
        assert (ndcg_at_k(order, relevant, K) == pytest.approx(1.0)) == full


def scored_dataset(seed=0, n_users=30, n_items=25):
    rng = np.random.default_rng(seed)
    train, test = [], []
    for u in range(n_users):
        items = rng.permutation(n_items)
        train += [(u, int(i)) for i in items[:4]]
        if u % 7 != 3:  # some users have no test items
            test += [(u, int(i)) for i in items[4 : 4 + rng.integers(1, 4)]]
    return make_dataset(train, n_users, n_items, noise=np.ones(len(train)), test=test), rng.random((n_users, n_items))


class TestEvaluate:
    def test_matches_per_user_oracle(self):
        ds, scores = scored_dataset()
        report = evaluate(lambda us: scores[us], ds, ks=(5, 10))
        rec, nd = [], []
        for u in range(ds.n_users):
            rel = set(ds.test.items[ds.test.users == u].tolist())
            if not rel:
                continue
            masked = scores[u].copy()
            masked[list(ds.user_pos[u])] = -np.inf
            order = [int(i) for i in np.argsort(-masked, kind="stable")]
            rec.append(sum(i in rel for i in order[:10]) / len(rel))
            ideal = sum(1 / math.log2(p + 2) for p in range(min(10, len(rel))))
            nd.append(oracle_dcg(order, rel, 10) / ideal)
        assert report.metrics["recall@10"] == pytest.approx(np.mean(rec), abs=1e-12)
        assert report.metrics["ndcg@10"] == pytest.approx(np.mean(nd), abs=1e-12)
        assert report.n_users == len(rec) and report.n_skipped == ds.n_users - len(rec)

    def test_perfect_scores(self):
        ds, _ = scored_dataset(1)
        perfect = np.zeros((ds.n_users, ds.n_items))
        perfect[ds.test.users, ds.test.items] = 1.0
        report = evaluate(lambda us: perfect[us], ds, ks=(2,))
        counts = np.bincount(ds.test.users, minlength=ds.n_users)
        expected = np.mean([min(1.0, 2 / c) for c in counts if c])
        assert report.metrics["recall@2"] == pytest.approx(expected)

    def test_monotone_transform_invariance(self):
        ds, scores = scored_dataset(2)
        a = evaluate(lambda us: scores[us], ds, ks=(5,))
        b = evaluate(lambda us: np.exp(3 * scores[us]) - 7, ds, ks=(5,))
        assert a.metrics == b.metrics

    def test_random_scores_near_uniform_recall(self):
        n_users, n_items, K = 2000, 200, 20
        rng = np.random.default_rng(0)
        train = [(u, int(rng.integers(n_items))) for u in range(n_users)]
        test = [(u, (train[u][1] + 1 + int(rng.integers(n_items - 1))) % n_items) for u in range(n_users)]
        ds = make_dataset(train, n_users, n_items, noise=np.ones(n_users), test=test)
        report = evaluate(lambda us: rng.random((len(us), n_items)), ds, ks=(K,))
        # one masked item leaves n_items - 1 candidates; binomial SE is about 0.007
        expected = K / (n_items - 1)
        assert abs(report.metrics[f"recall@{K}"] - expected) < 4 * math.sqrt(expected * (1 - expected) / n_users)

    def test_deterministic_and_json(self):
        ds, scores = scored_dataset(3)
        a = evaluate(lambda us: scores[us], ds).to_json()
        b = evaluate(lambda us: scores[us], ds).to_json()
        assert a == b
        assert json.loads(a)["meta"]["skip_policy"] == SKIP_POLICY

    def test_groups(self):
        ds, scores = scored_dataset(4)
        groups = np.arange(ds.n_users) % 2
        report = evaluate(lambda us: scores[us], ds, groups=groups)
        sizes = [np.sum(groups[report.users] == g) for g in (0, 1)]
        total = sum(report.groups[str(g)]["recall@20"] * sizes[g] for g in (0, 1))
        assert total / sum(sizes) == pytest.approx(report.metrics["recall@20"])

    def test_chunking_irrelevant(self):
        ds, scores = scored_dataset(5)
        a = evaluate(lambda us: scores[us], ds, chunk=4)
        b = evaluate(lambda us: scores[us], ds, chunk=512)
        assert a.metrics == b.metrics

    def test_empty_partition(self):
        ds = make_dataset([(0, 0)], 1, 3)
        with pytest.raises(ValueError):
            evaluate(lambda us: np.zeros((len(us), 3)), ds)


class TestDropDiagnostics:
    def test_set_example(self):
        assert drop_precision_recall({"a", "b"}, {"a", "c"}) == (0.5, 0.5, True)

    def test_drop_nothing(self):
        assert drop_precision_recall(set(), {"a"}) == (0.0, 0.0, False)

    def test_per_epoch_rows(self):
        ds = make_dataset([(0, i) for i in range(6)], 1, 8, noise=np.array([1, 0, 1, 0, 1, 1]))
        log = DropLog()
        log.append(1, 0.0, np.array([0, 1, 2]), np.array([], int))
        log.append(1, 0.2, np.array([3, 4, 5]), np.array([3, 4]))
        log.append(2, 0.2, np.arange(6), np.array([1]))
        rows = denoise_precision_recall(log, ds)
        assert [r["epoch"] for r in rows] == [1, 2]
        first = rows[0]
        assert (first["n_fp"], first["n_dropped"], first["n_dropped_fp"]) == (2, 2, 1)
        assert first["recall"] == 0.5 and first["precision"] == 0.5
        assert first["baseline_recall"] == pytest.approx(0.1)
        assert first["baseline_precision"] == pytest.approx(2 / 6)
        assert rows[1]["precision"] == 1.0


def oracle_groups(counts, n_groups):
    """Walk users by ascending count, closing a group once its running mass reaches the next share."""
    order = sorted(range(len(counts)), key=lambda u: (counts[u], u))
    total = sum(counts)
    out, g, mass = [0] * len(counts), 0, 0
    for pos, u in enumerate(order):
        out[u] = g
        mass += counts[u]
        left_users = len(order) - pos - 1
        if g < n_groups - 1 and (mass >= (g + 1) * total / n_groups - 1e-9 or left_users == n_groups - 1 - g):
            g += 1
    return out


class TestGroups:
    def test_equal_counts(self):
        ds = make_dataset([(u, 0) for u in range(4)], 4, 2)
        assert np.bincount(group_users_by_activity(ds, 2)).tolist() == [2, 2]

    def test_heavy_user_alone(self):
        pairs = [(0, i) for i in range(10)] + [(u, 0) for u in range(1, 11)]
        ds = make_dataset(pairs, 11, 12)
        groups = group_users_by_activity(ds, 2)
        assert groups.tolist() == oracle_groups([10] + [1] * 10, 2) == [1] + [0] * 10

    @settings(max_examples=50, deadline=None)
    @given(counts=st.lists(st.integers(1, 9), min_size=4, max_size=15), n_groups=st.integers(2, 4))
    def test_matches_greedy_oracle(self, counts, n_groups):
        pairs = [(u, i) for u, c in enumerate(counts) for i in range(c)]
        ds = make_dataset(pairs, len(counts), 10)
        assert group_users_by_activity(ds, n_groups).tolist() == oracle_groups(counts, n_groups)

    def test_too_few_users(self):
        with pytest.raises(ValueError):
            group_users_by_activity(make_dataset([(0, 0)], 1, 1), 2)
