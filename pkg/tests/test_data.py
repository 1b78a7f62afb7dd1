import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adtrec.data import (
    DataFormatError,
    Dataset,
    Interactions,
    inject_false_positives,
    load_dataset,
    load_interactions,
    reveal_extra_feedback,
    sample_negatives,
    save_dataset,
    split_holdout,
    synthesize_dataset,
)

from conftest import make_dataset


def write(tmp_path, text, name="data.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def pairs(part):
    return set(zip(part.users.tolist(), part.items.tolist()))


class TestLoad:
    def test_rating_threshold_flags(self, tmp_path):
        p = write(tmp_path, "u1\ti1\t5\nu1\ti2\t2\nu2\ti1\t4\n")
        ds = load_interactions(p, threshold=3)
        assert ds.train.noise.tolist() == [1, 0, 1]
        assert (ds.n_users, ds.n_items) == (2, 2)

    def test_single_interaction(self, tmp_path):
        ds = load_interactions(write(tmp_path, "a\tb\n"))
        assert (ds.n_users, ds.n_items) == (1, 1)
        assert not ds.train.has_flags

    def test_duplicates_keep_last(self, tmp_path):
        ds = load_interactions(write(tmp_path, "a\tx\t1\na\ty\t5\na\tx\t4\n"))
        assert len(ds.train) == 2
        flags = dict(zip(ds.train.items.tolist(), ds.train.noise.tolist()))
        assert flags[0] == 1

    def test_dwell_preset(self, tmp_path):
        ds = load_interactions(write(tmp_path, "a\tx\t9.5\t100\na\ty\t30\t101\n"), threshold="dwell")
        assert ds.train.noise.tolist() == [0, 1]

    def test_malformed_line_reports_number(self, tmp_path):
        p = write(tmp_path, "a\tx\t3\nbroken\n")
        with pytest.raises(DataFormatError, match=":2:"):
            load_interactions(p)

    def test_bad_value(self, tmp_path):
        with pytest.raises(DataFormatError, match=":1:"):
            load_interactions(write(tmp_path, "a\tx\tfive\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_interactions(write(tmp_path, "\n"))

    def test_save_roundtrip(self, tmp_path, small_noisy):
        ds = reveal_extra_feedback(small_noisy, 0.2, seed=0)
        save_dataset(ds, tmp_path / "out")
        back = load_dataset(tmp_path / "out")
        assert (back.n_users, back.n_items) == (ds.n_users, ds.n_items)
        for name in ("train", "valid", "test"):
            assert getattr(back, name).equals(getattr(ds, name))
        line = (tmp_path / "out" / "train.flags.tsv").read_text().splitlines()[0]
        assert len(line.split("\t")) == 4


class TestSplit:
    def test_per_user_counts(self):
        ds = make_dataset([(u, i) for u in range(3) for i in range(10)], 3, 10, noise=np.ones(30))
        out = split_holdout(ds, (0.8, 0.1, 0.1), seed=0)
        for part, n in ((out.train, 8), (out.valid, 1), (out.test, 1)):
            assert np.bincount(part.users, minlength=3).tolist() == [n] * 3

    def test_all_noisy_gives_empty_test(self):
        ds = make_dataset([(0, i) for i in range(10)], 1, 10, noise=np.zeros(10))
        with pytest.warns(RuntimeWarning):
            out = split_holdout(ds, (0.8, 0.1, 0.1), seed=0)
        assert len(out.test) == 0
        assert len(out.train) + len(out.valid) == 9

    def test_deterministic(self, small_noisy):
        a = split_holdout(small_noisy, (0.7, 0.15, 0.15), seed=11)
        b = split_holdout(small_noisy, (0.7, 0.15, 0.15), seed=11)
        for name in ("train", "valid", "test"):
            assert getattr(a, name).equals(getattr(b, name))

    def test_small_users_stay_in_train(self):
        ds = make_dataset([(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (1, 3)], 2, 5, noise=np.ones(6))
        out = split_holdout(ds, (0.5, 0.25, 0.25), seed=1)
        assert np.sum(out.train.users == 0) == 2

    def test_test_is_clean(self, small_noisy):
        assert np.all(small_noisy.test.noise == 1)

    def test_bad_ratios(self, small_noisy):
        with pytest.raises(ValueError):
            split_holdout(small_noisy, (0.5, 0.2, 0.2))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n_users=st.integers(1, 8), n_items=st.integers(3, 12))
    def test_partitions_disjoint(self, seed, n_users, n_items):
        rng = np.random.default_rng(seed)
        keys = np.flatnonzero(rng.random(n_users * n_items) < 0.6)
        if len(keys) == 0:
            return
        ds = make_dataset(
            list(zip(keys // n_items, keys % n_items)), n_users, n_items, noise=rng.integers(0, 2, len(keys))
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out = split_holdout(ds, (0.6, 0.2, 0.2), seed=seed)
        a, b, c = pairs(out.train), pairs(out.valid), pairs(out.test)
        assert not (a & b) and not (a & c) and not (b & c)
        assert len(a) + len(b) + len(out.test) + int(np.sum(ds.train.noise == 0)) >= len(keys)


class TestNegatives:
    def test_support(self):
        ds = make_dataset([(0, 0), (0, 2)], 1, 5)
        batch = sample_negatives(np.array([0]), ds, 1, np.random.default_rng(0))
        assert len(batch.neg_items) == 1 and batch.neg_items[0] in {1, 3, 4}

    def test_count(self):
        ds = make_dataset([(0, 0), (1, 1)], 2, 10)
        batch = sample_negatives(np.array([0, 1]), ds, 4, np.random.default_rng(0))
        assert len(batch.neg_items) == 8 and len(batch) == 10

    def test_forced_outcome(self):
        ds = make_dataset([(0, i) for i in range(6) if i != 4], 1, 6)
        batch = sample_negatives(np.arange(5), ds, 3, np.random.default_rng(1))
        assert set(batch.neg_items.tolist()) == {4}

    def test_full_user_errors(self):
        ds = make_dataset([(0, 0), (0, 1)], 1, 2)
        with pytest.raises(ValueError, match="every item"):
            sample_negatives(np.array([0]), ds, 1, np.random.default_rng(0))

    def test_ratio_validation(self):
        ds = make_dataset([(0, 0)], 1, 3)
        with pytest.raises(ValueError):
            sample_negatives(np.array([0]), ds, 0, np.random.default_rng(0))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_never_collide_with_positives(self, seed, small_noisy):
        rng = np.random.default_rng(seed)
        idx = rng.integers(len(small_noisy.train), size=64)
        batch = sample_negatives(idx, small_noisy, 2, rng)
        for u, i in zip(batch.neg_users, batch.neg_items):
            assert i not in small_noisy.user_pos[u]


class TestSynthesize:
    def test_density_one(self):
        ds = synthesize_dataset(3, 4, 2, density=1.0, seed=0)
        assert len(ds.train) == 12

    def test_deterministic(self):
        a = synthesize_dataset(30, 20, 3, 0.1, seed=5)
        b = synthesize_dataset(30, 20, 3, 0.1, seed=5)
        assert a.train.equals(b.train)

    def test_default_scale_count(self):
        ds = synthesize_dataset(2000, 1000, 16, 0.02, seed=0)
        # ceil(0.02 * 1000) = 20 positives for each of 2000 users
        assert len(ds.train) == 2000 * 20 == 40_000
        assert np.all(ds.train.noise == 1)

    def test_top_items_by_inner_product(self):
        ds = synthesize_dataset(5, 30, 3, 0.1, seed=2)
        rng = np.random.default_rng(2)
        uf, itf = rng.standard_normal((5, 3)), rng.standard_normal((30, 3))
        for u in range(5):
            expected = set(np.argsort(-(uf[u] @ itf.T))[:3].tolist())
            assert set(ds.user_pos[u].tolist()) == expected

    def test_density_too_small(self):
        with pytest.raises(ValueError):
            synthesize_dataset(3, 10, 2, density=0.05)


class TestInject:
    def test_rate_zero_identity(self, small_noisy):
        assert inject_false_positives(small_noisy, 0.0) is small_noisy

    def test_half(self):
        ds = make_dataset([(u, i) for u in range(10) for i in range(10)], 10, 40, noise=np.ones(100))
        out = inject_false_positives(ds, 0.5, seed=1)
        assert len(out.train) == 200
        assert np.mean(out.train.noise == 0) == 0.5

    def test_test_untouched_and_disjoint(self):
        base = split_holdout(synthesize_dataset(50, 40, 4, 0.2, seed=1), (0.8, 0.1, 0.1), seed=1)
        out = inject_false_positives(base, 0.3, seed=2)
        assert out.test.equals(base.test) and out.valid.equals(base.valid)
        injected = out.train.take(out.train.noise == 0)
        assert not (pairs(injected) & (pairs(base.test) | pairs(base.valid) | pairs(base.train)))
        n_clean = len(base.train)
        assert len(injected) == math.ceil(0.3 * n_clean / 0.7 - 1e-9)

    def test_insufficient_pairs(self):
        ds = make_dataset([(0, 0), (0, 1)], 1, 3, noise=np.ones(2))
        with pytest.raises(ValueError, match="free"):
            inject_false_positives(ds, 0.9)

    def test_reproducible(self, small_noisy):
        a = inject_false_positives(small_noisy, 0.2, seed=9)
        b = inject_false_positives(small_noisy, 0.2, seed=9)
        assert a.train.equals(b.train)


def test_extra_only_on_true_positives(small_noisy):
    ds = reveal_extra_feedback(small_noisy, 0.1, seed=4)
    assert np.all(ds.train.noise[ds.train.extra] == 1)
    assert ds.train.extra.sum() == round(0.1 * np.sum(small_noisy.train.noise == 1))


def test_dataset_validates_ranges():
    with pytest.raises(ValueError):
        Dataset(2, 2, Interactions.from_arrays([0, 2], [0, 1]))
    with pytest.raises(ValueError):
        Dataset(2, 2, Interactions.from_arrays([0], [0], [0], [True]))


def test_records_roundtrip():
    part = Interactions.from_arrays([0, 1], [2, 3], [1, -1], [True, False])
    recs = list(part)
    assert recs[0].noise_flag == 1 and recs[0].extra
    assert recs[1].noise_flag is None
    assert Interactions.from_records(recs).equals(part)
