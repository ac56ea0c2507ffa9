import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from cdnrec.baselines import MethodConfig, build_model
from cdnrec.datasets import build_stats, split_head_tail
from cdnrec.errors import ConfigError, ShapeError
from cdnrec.model import (
    MAIN,
    REGULARIZER,
    AdapterSchedule,
    Batch,
    ItemFeatureSplit,
    ItemTowerConfig,
    alpha,
    frequency_buckets,
)
from cdnrec.numerics import Adam, Tape, check_gradients
from conftest import SMALL_ITEM, SMALL_USER, make_log


def toy(method="cdn", n_users=8, n_items=8, n_genres=4, seed=0, item_config=SMALL_ITEM, n_events=40):
    rng = np.random.default_rng(seed)
    genres = [[f"g{g}" for g in sorted(set(rng.integers(0, n_genres, size=rng.integers(1, 3)).tolist()))] for _ in range(n_items)]
    users = rng.integers(0, n_users, size=n_events)
    items = np.minimum(rng.zipf(1.5, size=n_events) - 1, n_items - 1)
    log = make_log(users, items, n_users, n_items, genres)
    stats = split_head_tail(build_stats(log), 0.25)
    model = build_model(MethodConfig(name=method), log, stats, item_config, SMALL_USER)
    store = model.init_params(seed)
    # make the gate non-trivial
    if "item/gate/w" in store:
        store["item/gate/w"][...] = rng.normal(size=store["item/gate/w"].shape)
    return model, store, stats


# schedule


@given(st.integers(1, 200), st.floats(1.0001, 50))
def test_cdn_schedule_properties(T, gamma):
    s = AdapterSchedule("cdn", T, gamma=gamma)
    values = [alpha(t, s) for t in range(T + 1)]
    assert values[0] == 1.0
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(1 - 1 / gamma**2, abs=1e-12)
    assert values[-1] > 0


def test_schedule_examples():
    assert alpha(10, AdapterSchedule("cdn", 10, gamma=2.0)) == 0.75
    bbn = AdapterSchedule("bbn", 10)
    assert alpha(0, bbn) == 1.0 and alpha(10, bbn) == 0.0
    fixed = AdapterSchedule("fixed", 5, alpha0=0.5)
    assert {alpha(t, fixed) for t in range(6)} == {0.5}


@given(st.integers(1, 100))
def test_gamma_one_formula_matches_bbn(T):
    from cdnrec.model import cumulative_alpha

    bbn = AdapterSchedule("bbn", T)
    assert all(cumulative_alpha(t, T, 1.0) == alpha(t, bbn) for t in range(T + 1))


@pytest.mark.parametrize("gamma", [1.0, 0.5, None])
def test_cdn_schedule_needs_gamma_above_one(gamma):
    with pytest.raises(ConfigError):
        AdapterSchedule("cdn", 10, gamma=gamma)


def test_alpha_rejects_out_of_range_epoch():
    with pytest.raises(ValueError):
        alpha(11, AdapterSchedule("bbn", 10))


# gate


def test_frequency_buckets():
    assert frequency_buckets(np.array([0, 1, 2, 3, 4, 7, 8, 10**9]), 16).tolist() == [0, 1, 2, 2, 3, 3, 4, 15]


def test_zero_gate_matrix_is_uniform():
    model, store, _ = toy(item_config=ItemTowerConfig(n_mem_experts=2, n_gen_experts=1, expert_hidden_dims=(4,), embedding_dim=3, output_dim=3))
    store["item/gate/w"][...] = 0.0
    g = model.gate_weights(store)
    assert np.allclose(g, 1 / 3, rtol=0, atol=1e-15)


@given(st.integers(0, 1000))
def test_gate_is_a_strictly_positive_simplex(seed):
    model, store, _ = toy(seed=seed % 50)
    store["item/gate/w"][...] = np.random.default_rng(seed).normal(0, 5, size=store["item/gate/w"].shape)
    g = model.gate_weights(store)
    assert np.all(g > 0)
    assert np.allclose(g.sum(axis=1), 1.0, rtol=0, atol=1e-9)


def test_degenerate_gate_selects_first_memorization_expert():
    model, store, _ = toy()
    store["item/gate/w"][...] = [[800.0, -800.0]]  # softmax -> exactly (1, 0) in float64
    items = np.arange(model.n_items)
    t = Tape(store)
    mem_out = model.item_tower.expert_outputs(t, items)[0].value
    assert np.array_equal(model.item_embed(store), mem_out)


def test_items_sharing_genres_match_under_generalization_gate():
    model, store, _ = toy()
    genre = model.item_tower.gen_features[0]
    sig = [genre.of(i) for i in range(model.n_items)]
    pairs = [(a, b) for a in range(model.n_items) for b in range(a + 1, model.n_items) if sig[a] == sig[b]]
    assert pairs, "toy catalog should contain items with identical genres"
    store["item/gate/w"][...] = [[-800.0, 800.0]]
    y = model.item_embed(store)
    for a, b in pairs:
        assert np.array_equal(y[a], y[b])


def test_feature_decoupling():
    model, store, _ = toy()
    t = Tape(store)
    items = np.arange(model.n_items)
    before = [o.value.copy() for o in model.item_tower.expert_outputs(t, items)]
    store["item/emb/genre"][...] += 1.0
    after = [o.value for o in model.item_tower.expert_outputs(Tape(store), items)]
    assert np.array_equal(before[0], after[0]) and not np.array_equal(before[1], after[1])
    store["item/emb/item_id"][...] += 1.0
    again = [o.value for o in model.item_tower.expert_outputs(Tape(store), items)]
    assert np.array_equal(after[1], again[1]) and not np.array_equal(after[0], again[0])


def test_feature_split_roles():
    model, _, _ = toy()
    assert model.item_tower.split == ItemFeatureSplit(("item_id",), ("genre",))
    with pytest.raises(ConfigError):
        ItemFeatureSplit(("genre",), ("genre",))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("method", ["cdn", "two_tower", "udn"])
def test_item_embedding_matches_loop_oracle(seed, method):
    model, store, stats = toy(method, seed=seed)
    y = model.item_embed(store)
    for i in range(model.n_items):
        assert np.allclose(y[i], oracles.item_embedding(store, model.item_tower, i, stats.freq), rtol=0, atol=1e-12)


# user tower


def test_copied_heads_give_identical_branches():
    model, store, _ = toy()
    for k in store.names():
        if k.startswith("user/h_m/"):
            store[k.replace("user/h_m/", "user/h_r/")][...] = store[k]
    users = np.arange(model.n_users)
    assert np.array_equal(model.user_embed(store, users, MAIN), model.user_embed(store, users, REGULARIZER))


def test_main_only_loss_leaves_regularizer_head_untouched():
    model, store, _ = toy()
    t = Tape(store)
    batch = Batch(np.arange(6), np.arange(6), np.arange(6)[::-1], np.arange(6)[::-1])
    t.backward(model.loss(t, batch, 1.0))
    for k in store.names():
        if k.startswith("user/h_r/"):
            assert not store.grads[k].any()
    assert np.abs(store.grads["user/f/w0"]).sum() > 0


def test_user_embedding_matches_loop_oracle():
    model, store, _ = toy()
    x = model.user_embed(store, np.arange(model.n_users), REGULARIZER)
    for u in range(model.n_users):
        assert np.allclose(x[u], oracles.user_embedding(store, model.user_tower, u, "user/h_r/"), rtol=0, atol=1e-12)


# logits and loss


def paired_batch(model, n, seed):
    rng = np.random.default_rng(seed)
    return Batch(
        rng.integers(0, model.n_users, n),
        rng.integers(0, model.n_items, n),
        rng.integers(0, model.n_users, n),
        rng.integers(0, model.n_items, n),
    )


def test_alpha_one_gives_main_dot_products():
    model, store, _ = toy()
    b = paired_batch(model, 5, 0)
    logits, a = model.training_logits(Tape(store), b, 1.0)
    expected = model.user_embed(store, b.users_m) @ model.item_embed(store, b.items_m).T
    assert a == 1.0 and np.array_equal(logits.value, expected)


def test_identical_batches_at_half_alpha_with_copied_heads():
    model, store, _ = toy()
    for k in store.names():
        if k.startswith("user/h_m/"):
            store[k.replace("user/h_m/", "user/h_r/")][...] = store[k]
    b = paired_batch(model, 5, 1)
    same = Batch(b.users_m, b.items_m, b.users_m, b.items_m)
    mixed, _ = model.training_logits(Tape(store), same, 0.5)
    main, _ = model.training_logits(Tape(store), same, 1.0)
    assert np.allclose(mixed.value, main.value, rtol=0, atol=1e-13)


def test_two_by_two_hand_logits():
    model, store, _ = toy()
    xm = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]])
    xr = np.array([[0.0, 3.0, 0.0], [1.0, 1.0, 1.0]])
    ym = np.array([[1.0, 1.0, 0.0], [2.0, 0.0, 1.0]])
    yr = np.array([[0.0, 0.0, 1.0], [1.0, -1.0, 0.0]])
    t = Tape(store)
    # hand-set embeddings: bypass the towers with constant blocks
    model.user_tower.head = lambda tape, z, branch=MAIN: tape.const(xm if branch == MAIN else xr)
    model.item_tower.forward = lambda tape, items, branch=None: tape.const(np.vstack([ym, yr]) if len(items) == 4 else ym)
    logits, _ = model.training_logits(t, Batch(np.array([0, 1]), np.array([0, 1]), np.array([2, 3]), np.array([2, 3])), 0.25)
    # entry (r, c) = 0.25 x_m[r].y_m[c] + 0.75 x_r[r].y_r[c]
    hand = [[0.25 * 1 + 0.75 * 0, 0.25 * 4 + 0.75 * -3], [0.25 * 1 + 0.75 * 1, 0.25 * 0 + 0.75 * 0]]
    assert np.allclose(logits.value, hand, rtol=0, atol=1e-15)


def test_batch_size_mismatch_is_a_shape_error():
    model, store, _ = toy()
    with pytest.raises(ShapeError):
        model.training_logits(Tape(store), Batch(np.arange(3), np.arange(3), np.arange(2), np.arange(2)), 0.5)


def test_alpha_one_loss_equals_two_tower_loss():
    from cdnrec.baselines import two_tower_loss

    model, store, _ = toy()
    b = paired_batch(model, 6, 2)
    cdn = float(model.loss(Tape(store), b, 1.0).value)
    tt = float(two_tower_loss(Tape(store), model, b).value)
    assert cdn == pytest.approx(tt, abs=1e-14)


def test_single_row_batch_has_zero_loss():
    model, store, _ = toy()
    assert float(model.loss(Tape(store), paired_batch(model, 1, 0), 0.7).value) == 0.0


@pytest.mark.parametrize("seed", range(8))
def test_cdn_loss_matches_loop_oracle(seed):
    model, store, stats = toy(seed=seed)
    b = paired_batch(model, 6, seed)
    a = [1.0, 0.9, 0.75, 0.3][seed % 4]
    got = float(model.cdn_loss(Tape(store), b, a).value)
    want = oracles.cdn_loss(store, model, b.users_m, b.items_m, b.users_r, b.items_r, a, stats.freq)
    assert got == pytest.approx(want, abs=1e-12)


def test_full_loss_gradient_check():
    model, store, _ = toy()
    b = paired_batch(model, 8, 3)
    report = check_gradients(lambda t: model.loss(t, b, 0.6), store, n_coords=150)
    assert report.passed, report
    assert report.n_checked >= 100


def test_branch_isolation_matches_single_branch_model():
    # alpha = 1 on the bilateral model must step every shared slot exactly as a
    # single-branch model with the same item tower does
    model_cdn, s1, stats = toy("cdn")
    model_idn = build_model(MethodConfig(name="idn"), _train_log(model_cdn), stats, SMALL_ITEM, SMALL_USER)
    s2 = s1.without("user/h_r/")
    b = paired_batch(model_cdn, 6, 4)
    for model, s in ((model_cdn, s1), (model_idn, s2)):
        t = Tape(s)
        t.backward(model.loss(t, b, 1.0))
        Adam(lr=0.01).step(s)
    for k in s2.names():
        assert np.array_equal(s1[k], s2[k]), k


def _train_log(model):
    tower = model.item_tower
    # rebuild a log with the same vocab and features; only its shape matters here
    genres = [list(tower.gen_features[0].of(i)) for i in range(model.n_items)]
    return make_log([0], [0], model.n_users, model.n_items, genres)


# scoring


def test_score_is_bilinear_and_main_branch_only():
    model, store, _ = toy()
    s = model.score(store, 2, 3)
    x = model.user_embed(store, [2])[0]
    y = model.item_embed(store, [3])[0]
    assert s == float(x @ y)
    assert model.score_matrix(store, [2])[0, 3] == pytest.approx(s, abs=1e-14)
    b = Batch(np.array([2]), np.array([3]), np.array([5]), np.array([1]))
    logits, _ = model.training_logits(Tape(store), b, 1.0)
    assert logits.value[0, 0] == pytest.approx(s, abs=1e-14)


def test_zero_item_embedding_scores_zero():
    model, store, _ = toy()
    y = np.zeros((model.n_items, SMALL_ITEM.output_dim))
    assert not model.score_matrix(store, np.arange(model.n_users), y).any()


@given(st.floats(-4, 4))
def test_score_scales_with_item_vector(c):
    model, store, _ = toy()
    y = model.item_embed(store)
    base = model.score_matrix(store, [1], y)
    assert np.allclose(model.score_matrix(store, [1], c * y), c * base, rtol=1e-12, atol=1e-12)


def test_index_validation():
    model, store, _ = toy()
    with pytest.raises(IndexError):
        model.item_embed(store, [model.n_items])
    with pytest.raises(IndexError):
        model.user_embed(store, [-1])
