import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdnrec.datasets import (
    build_regularizer_distribution,
    build_stats,
    chrono_split,
    load_bookcrossing,
    load_movielens,
    load_prepared,
    n_head_items,
    prepare_split,
    save_prepared,
    split_head_tail,
    synth_zipf,
)
from cdnrec.errors import ConfigError, DataFormatError
from conftest import make_log


def log_from_counts(counts, n_users=None):
    items = [i for i, c in enumerate(counts) for _ in range(c)]
    n_users = n_users or max(1, len(items))
    users = [k % n_users for k in range(len(items))]
    return make_log(users, items, n_users, len(counts))


# MovieLens


def write_movielens(tmp_path, ratings, movies):
    r = tmp_path / "ratings.dat"
    m = tmp_path / "movies.dat"
    r.write_text("\n".join(ratings) + ("\n" if ratings else ""))
    m.write_text("\n".join(movies) + "\n")
    return r, m


MOVIES = ["1::Toy Story (1995)::Animation|Children's|Comedy", "1193::One Flew (1975)::Drama", "7::Sabrina::Comedy|Romance"]


def test_movielens_line_maps_to_positive(tmp_path):
    log = load_movielens(*write_movielens(tmp_path, ["1::1193::5::978300760"], MOVIES))
    (ev,) = list(log)
    assert ev.user_id == 0 and ev.label == 1 and ev.timestamp == 978300760
    assert log.item_ids[ev.item_id] == 1193
    assert log.item_features["genre"].of(ev.item_id) == ("Drama",)


def test_movielens_every_rating_is_positive(tmp_path):
    ratings = ["2::1::1::5", "2::7::3::6", "10::1::5::7"]
    log = load_movielens(*write_movielens(tmp_path, ratings, MOVIES))
    assert log.labels.tolist() == [1, 1, 1]
    assert log.user_ids == (2, 10)
    assert log.item_ids == (1, 7)  # only rated movies, numeric order


def test_movielens_empty_ratings(tmp_path):
    log = load_movielens(*write_movielens(tmp_path, [], MOVIES))
    assert len(log) == 0 and log.n_users == 0 and log.n_items == 0


def test_movielens_reports_bad_line(tmp_path):
    with pytest.raises(DataFormatError, match=":2:"):
        load_movielens(*write_movielens(tmp_path, ["1::1::5::1", "1::1::5"], MOVIES))
    with pytest.raises(DataFormatError, match="not in"):
        load_movielens(*write_movielens(tmp_path, ["1::99::5::1"], MOVIES))


# BookCrossing


def write_bx(tmp_path, ratings, books):
    r = tmp_path / "BX-Book-Ratings.csv"
    b = tmp_path / "BX-Books.csv"
    r.write_bytes(("\n".join(ratings) + "\n").encode("latin-1"))
    b.write_bytes(("\n".join(books) + "\n").encode("latin-1"))
    return r, b


BOOKS = [
    '"ISBN";"Book-Title";"Book-Author";"Year-Of-Publication";"Publisher"',
    '"034545104X";"Flu";"Gina Kolata";"1999";"Ballantine"',
    '"0155061224";"Rites";"Rich Shapero";"2004";"Too Far"',
    '"0002005018";"Clara";"Richard Bruce Wright";"2001";"HarperFlamingo Canada"',
]


def test_bookcrossing_row_and_drops(tmp_path):
    ratings = [
        '"User-ID";"ISBN";"Book-Rating"',
        '"276725";"034545104X";"0"',
        '"276726";"0155061224";"5"',
        '"276727";"9999999999";"0"',
    ]
    log = load_bookcrossing(*write_bx(tmp_path, ratings, BOOKS))
    assert len(log) == 2 and log.labels.tolist() == [1, 1]
    assert log.info["dropped"] == 1 and log.info["kept"] == 2
    first = log[0]
    assert log.user_ids[first.user_id] == "276725" and log.item_ids[first.item_id] == "034545104X"
    assert log.item_features["author"].of(first.item_id) == ("gina kolata",)
    assert log.item_features["year_bucket"].of(first.item_id) == ("1990s",)
    assert log.timestamps.tolist() == [0, 1]


def test_bookcrossing_latin1_and_bad_row(tmp_path):
    books = BOOKS + ['"0000000001";"Ça";"Zoë Ünß";"0";"Édition"']
    ok = ['"1";"0000000001";"0"']
    log = load_bookcrossing(*write_bx(tmp_path, ok, books))
    assert log.item_features["author"].of(0) == ("zoë ünß",)
    assert log.item_features["year_bucket"].of(0) == ("unknown",)
    with pytest.raises(DataFormatError, match=":2:"):
        load_bookcrossing(*write_bx(tmp_path, ['"1";"0000000001";"0"', '"1";"x"'], books))


def test_bookcrossing_join_counts_match_oracle(tmp_path):
    rng = np.random.default_rng(0)
    known = ["034545104X", "0155061224", "0002005018"]
    rows, expect_kept = [], 0
    for k in range(200):
        isbn = known[rng.integers(3)] if rng.random() < 0.7 else f"X{k:09d}"
        expect_kept += isbn in known
        rows.append(f'"{rng.integers(50)}";"{isbn}";"{rng.integers(11)}"')
    log = load_bookcrossing(*write_bx(tmp_path, rows, BOOKS))
    assert (log.info["kept"], log.info["dropped"]) == (expect_kept, 200 - expect_kept)


# statistics


def test_imbalance_factor_examples():
    assert build_stats(log_from_counts([10, 2, 1])).imbalance_factor == 10
    assert build_stats(log_from_counts([3, 3, 3])).imbalance_factor == 1


def test_imbalance_factor_ignores_unseen_items():
    assert build_stats(log_from_counts([4, 0, 2])).imbalance_factor == 2


def test_rank_breaks_ties_by_index():
    stats = build_stats(log_from_counts([2, 5, 2, 5]))
    assert stats.rank.tolist() == [3, 1, 4, 2]


def test_head_counts():
    counts = list(range(10, 0, -1))
    stats = split_head_tail(build_stats(log_from_counts(counts)), 0.2)
    assert stats.n_head == 2 and stats.is_head[:2].all()
    two = split_head_tail(build_stats(log_from_counts([1, 3])), 0.5)
    assert two.is_head.tolist() == [False, True]
    assert n_head_items(3706, 0.2) == 742 == math.ceil(0.2 * 3706)


@pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5, -0.1])
def test_head_fraction_bounds(fraction):
    with pytest.raises(ConfigError):
        split_head_tail(build_stats(log_from_counts([1, 2])), fraction)


@given(st.lists(st.integers(0, 20), min_size=2, max_size=30), st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_head_set_nesting(counts, f1, f2):
    if sum(counts) == 0:
        return
    lo, hi = sorted((f1, f2))
    stats = build_stats(log_from_counts(counts))
    small = split_head_tail(stats, lo).is_head
    large = split_head_tail(stats, hi).is_head
    assert not (small & ~large).any()


@given(st.lists(st.integers(1, 20), min_size=1, max_size=20))
def test_if_monotone_in_top_item(counts):
    before = build_stats(log_from_counts(counts)).imbalance_factor
    top = int(np.argmax(counts))
    bumped = list(counts)
    bumped[top] += 1
    assert build_stats(log_from_counts(bumped)).imbalance_factor >= before


# splits


def test_chrono_split_ten_events():
    log = make_log([0] * 10, list(range(10)), 1, 10, timestamps=[5, 3, 9, 1, 0, 8, 2, 7, 6, 4])
    s = chrono_split(log, (0.8, 0.1, 0.1))
    assert (len(s.train), len(s.valid), len(s.test)) == (8, 1, 1)
    assert s.test.timestamps.tolist() == [9] and s.valid.timestamps.tolist() == [8]
    assert s.train.timestamps.max() < s.valid.timestamps.min()


def test_chrono_split_small_user_stays_in_train():
    s = chrono_split(make_log([0, 0], [0, 1], 1, 2))
    assert (len(s.train), len(s.valid), len(s.test)) == (2, 0, 0)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 7), st.integers(0, 50)), min_size=1, max_size=80))
def test_chrono_split_is_a_partition(events):
    users, items, stamps = zip(*events)
    log = make_log(users, items, 6, 8, timestamps=stamps)
    s = chrono_split(log)
    rows = lambda l: Counter(zip(l.users.tolist(), l.items.tolist(), l.timestamps.tolist()))  # noqa: E731
    assert rows(s.train) + rows(s.valid) + rows(s.test) == rows(log)
    for u in range(6):
        tr = s.train.timestamps[s.train.users == u]
        te = s.test.timestamps[s.test.users == u]
        if tr.size and te.size:
            assert tr.max() <= te.min()


def test_chrono_split_ratio_validation():
    with pytest.raises(ConfigError):
        chrono_split(make_log([0], [0], 1, 1), (0.5, 0.5))


# regularizer distribution


def test_regularizer_caps_head_and_keeps_tail():
    counts = [100, 40, 7, 3, 1, 0]
    train = log_from_counts(counts, n_users=30)
    stats = split_head_tail(build_stats(train), 0.3)  # two head items
    reg = build_regularizer_distribution(train, stats, seed=0)
    freq = reg.item_counts().tolist()
    assert freq == [7, 7, 7, 3, 1, 0]
    # every tail row survives verbatim
    tail_rows = np.flatnonzero(~stats.is_head[train.items])
    kept = Counter(zip(reg.users.tolist(), reg.items.tolist(), reg.timestamps.tolist()))
    for r in tail_rows:
        assert kept[(int(train.users[r]), int(train.items[r]), int(train.timestamps[r]))] >= 1


@given(
    st.lists(st.integers(0, 40), min_size=3, max_size=25),
    st.floats(0.05, 0.6),
    st.integers(0, 2**16),
)
def test_regularizer_properties(counts, fraction, seed):
    train = log_from_counts(counts, n_users=7)
    if len(train) == 0:
        return
    stats = split_head_tail(build_stats(train), fraction)
    tail = ~stats.is_head
    if not tail.any() or stats.freq[tail].max() == 0:
        with pytest.raises(ValueError):
            build_regularizer_distribution(train, stats, seed)
        return
    reg = build_regularizer_distribution(train, stats, seed)
    cap = stats.freq[tail].max()
    freq = reg.item_counts()
    assert freq.max() == cap
    assert np.array_equal(freq[tail], stats.freq[tail])
    assert np.array_equal(freq[stats.is_head], np.minimum(stats.freq[stats.is_head], cap))
    # subsample of actual training rows, deterministic in the seed
    train_rows = Counter(zip(train.users.tolist(), train.items.tolist(), train.timestamps.tolist()))
    reg_rows = Counter(zip(reg.users.tolist(), reg.items.tolist(), reg.timestamps.tolist()))
    assert not reg_rows - train_rows
    again = build_regularizer_distribution(train, stats, seed)
    assert np.array_equal(again.timestamps, reg.timestamps)


def test_regularizer_rejects_foreign_stats():
    a = log_from_counts([5, 1, 1])
    stats = split_head_tail(build_stats(log_from_counts([4, 1, 1])), 0.3)
    with pytest.raises(ValueError):
        build_regularizer_distribution(a, stats, 0)


# synthetic data


def test_synth_is_deterministic():
    a = synth_zipf(50, 30, 1.2, 600, 4, seed=11)
    b = synth_zipf(50, 30, 1.2, 600, 4, seed=11)
    for col in ("users", "items", "timestamps", "labels"):
        assert getattr(a, col).tobytes() == getattr(b, col).tobytes()
    fa, fb = a.item_features["genre"], b.item_features["genre"]
    assert fa.values.tobytes() == fb.values.tobytes() and fa.offsets.tobytes() == fb.offsets.tobytes()
    assert synth_zipf(50, 30, 1.2, 600, 4, seed=12).items.tobytes() != a.items.tobytes()


def test_synth_if_grows_with_exponent():
    steep = build_stats(synth_zipf(2000, 1000, 1.5, 50_000, 10, seed=0)).imbalance_factor
    flat = build_stats(synth_zipf(2000, 1000, 0.5, 50_000, 10, seed=0)).imbalance_factor
    assert steep > flat


def test_synth_exponent_zero_is_near_uniform():
    # no genre or taste preference, so every draw is uniform over unseen items
    log = synth_zipf(400, 50, 0.0, 8000, 5, seed=1, pref_prob=0.0)
    freq = build_stats(log).freq
    expected = len(log) / 50
    # each user draws without replacement, so counts are less spread than binomial
    assert np.all(np.abs(freq - expected) < 5 * math.sqrt(expected))


def test_synth_sizes_and_minimum_activity():
    log = synth_zipf(100, 80, 1.0, 3000, 6, seed=2)
    assert log.n_users == 100 and log.n_items == 80
    assert np.bincount(log.users, minlength=100).min() >= 5
    per_user = log.user_item_sets()
    assert sum(len(s) for s in per_user) == len(log)  # no repeated items per user
    with pytest.raises(ConfigError):
        synth_zipf(0, 10, 1.0, 10, 2, seed=0)


# cache


def test_prepared_cache_roundtrip(tmp_path):
    log = synth_zipf(80, 40, 1.1, 1200, 5, seed=4)
    split, stats = prepare_split(log, 0.2, seed=4)
    save_prepared(tmp_path / "cache", split, stats, {"dataset": {"seed": 4}})
    split2, stats2, manifest = load_prepared(tmp_path / "cache")
    for name in ("train", "valid", "test", "regularizer"):
        a, b = getattr(split, name), getattr(split2, name)
        assert np.array_equal(a.users, b.users) and np.array_equal(a.items, b.items)
        assert np.array_equal(a.timestamps, b.timestamps)
    assert np.array_equal(stats.is_head, stats2.is_head)
    assert manifest["n_head"] == stats.n_head and manifest["dataset"] == {"seed": 4}
    assert manifest["imbalance_factor"] == stats.imbalance_factor
    assert (tmp_path / "cache" / "train.bin").stat().st_size == len(split.train) * 4 * 8
