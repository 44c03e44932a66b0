"""Environments: logging, ground-truth metrics, and dataset plumbing."""

import numpy as np
import pytest

from aoe.candidates import GreedyChoicePolicy, TopFivePolicy, UniformPolicy
from aoe.data import (
    load_letter_csv,
    load_ratings_table,
    make_synthetic_letter_data,
    make_synthetic_ratings,
    train_eval_split,
)
from aoe.environments import (
    ClassificationEnv,
    InteractionLog,
    RecsysEnv,
    build_recsys_env,
    rates_to_ratings,
    ratings_to_rates,
)


def test_rating_map_values():
    rates = ratings_to_rates(np.arange(6.0).reshape(1, -1))
    np.testing.assert_allclose(rates[0], [0.05, 0.23, 0.41, 0.59, 0.77, 0.95], atol=1e-15)
    with pytest.raises(ValueError):
        ratings_to_rates(np.array([[6.0]]))


def test_rating_map_round_trips():
    ratings = np.arange(6.0)
    np.testing.assert_allclose(rates_to_ratings(ratings_to_rates(ratings)), ratings, atol=1e-12)
    rates = np.array([0.05, 0.5, 0.95])
    np.testing.assert_allclose(ratings_to_rates(rates_to_ratings(rates)), rates, atol=1e-12)
    with pytest.raises(ValueError):
        rates_to_ratings(np.array([0.96]))
    with pytest.raises(ValueError):
        rates_to_ratings(np.array([0.04]))


def test_item_filter_drops_unpopular_columns():
    ratings = np.zeros((10, 3))
    ratings[:, 0] = 4.0          # everyone rated item 0 highly
    ratings[:2, 1] = 3.0         # item 1 rated by 2 of 10 users
    env, training, kept = build_recsys_env(ratings, item_threshold=0.2, threshold_scale="rating")
    # Column means with zeros included: 4.0, 0.6, 0.0.
    np.testing.assert_array_equal(kept, [0, 1])
    assert env.n_items == 2
    assert training.shape == (10, 2)
    # On the preference-rate scale item 1's mean is 0.05 + 0.18 * 0.6.
    _, _, kept_prob = build_recsys_env(ratings, item_threshold=0.16, threshold_scale="probability")
    np.testing.assert_array_equal(kept_prob, [0])
    with pytest.raises(ValueError):
        build_recsys_env(ratings, item_threshold=9.0)
    with pytest.raises(ValueError):
        build_recsys_env(ratings, threshold_scale="stars")


def test_training_split_hides_most_of_the_truth():
    rng = np.random.default_rng(3)
    ratings = rng.integers(1, 6, size=(40, 25)).astype(np.float64)
    env, training, kept = build_recsys_env(ratings, item_threshold=0.0, train_fraction=0.2, seed=7)
    assert kept.size == 25
    # The environment keeps the full table; the training split only a fifth.
    np.testing.assert_allclose(env.rates, ratings_to_rates(ratings))
    revealed = training > 0
    assert 0.08 < revealed.mean() < 0.35
    np.testing.assert_array_equal(training[revealed], ratings[revealed])
    assert np.all(training[~revealed] == 0.0)

    # Same seed, same split; new seed, new split.
    _, again, _ = build_recsys_env(ratings, item_threshold=0.0, train_fraction=0.2, seed=7)
    np.testing.assert_array_equal(again, training)
    _, other, _ = build_recsys_env(ratings, item_threshold=0.0, train_fraction=0.2, seed=8)
    assert not np.array_equal(other, training)

    # train_fraction=1.0 keeps everything; out-of-range fractions are rejected.
    _, full, _ = build_recsys_env(ratings, item_threshold=0.0, train_fraction=1.0)
    np.testing.assert_array_equal(full, ratings)
    with pytest.raises(ValueError):
        build_recsys_env(ratings, train_fraction=0.0)
    with pytest.raises(ValueError):
        build_recsys_env(ratings, train_fraction=1.1)


def test_classification_true_metric_by_hand():
    env = ClassificationEnv(np.zeros((2, 3)), np.array([0, 1]), n_actions=2, rounds=2)
    right = GreedyChoicePolicy(np.array([0, 1]), n_actions=2, epsilon=0.2)
    wrong = GreedyChoicePolicy(np.array([1, 0]), n_actions=2, epsilon=0.2)
    # Always-right choices score 1 - eps; always-wrong ones score the
    # leftover exploration mass.
    assert env.true_metric(right) == pytest.approx(0.8)
    assert env.true_metric(wrong) == pytest.approx(0.2)


def test_deployment_log_structure():
    rng = np.random.default_rng(0)
    x, y = make_synthetic_letter_data(300, seed=1)
    env = ClassificationEnv(x, y, rounds=120)
    pol = GreedyChoicePolicy(y.copy(), n_actions=26, epsilon=0.1)  # oracle choices
    log = env.deploy(pol, rng)
    assert len(log) == 120
    # Sampling is without replacement from the pool.
    assert np.unique(log.context_indices).size == 120
    assert set(np.unique(log.feedback)) <= {0.0, 1.0}
    cols = pol.prob_columns(log.context_indices)
    np.testing.assert_array_equal(log.propensities, cols[log.actions, np.arange(len(log))])


def test_deployments_are_unbiased_for_the_true_metric():
    x, y = make_synthetic_letter_data(400, seed=2)
    env = ClassificationEnv(x, y, rounds=80)
    pol = GreedyChoicePolicy((y + 1) % 26, n_actions=26, epsilon=0.3)
    truth = env.true_metric(pol)
    rng = np.random.default_rng(11)
    means = [env.deploy(pol, rng).feedback.mean() for _ in range(60)]
    se = np.std(means) / np.sqrt(len(means))
    assert abs(np.mean(means) - truth) < 4 * se + 1e-9


def test_recsys_env_rounds_and_unbiasedness():
    rates = np.random.default_rng(3).uniform(0.1, 0.9, size=(12, 6))
    env = RecsysEnv(rates, rounds_per_user=5)
    pol = UniformPolicy(6)
    rng = np.random.default_rng(4)
    log = env.deploy(pol, rng)
    assert len(log) == 60
    np.testing.assert_array_equal(np.bincount(log.context_indices), np.full(12, 5))
    assert env.true_metric(pol) == pytest.approx(rates.mean())
    means = [env.deploy(pol, rng).feedback.mean() for _ in range(120)]
    se = np.std(means) / np.sqrt(len(means))
    assert abs(np.mean(means) - rates.mean()) < 4 * se + 1e-9


def test_recsys_true_metric_with_top_sets():
    rates = np.array([[0.9, 0.1, 0.5], [0.2, 0.8, 0.4]])
    env = RecsysEnv(rates)
    pol = TopFivePolicy(np.array([[0], [1]]), n_actions=3, epsilon=0.3)
    # Per user: 0.7 * top rate + 0.15 * each other rate.
    expected = np.mean([0.7 * 0.9 + 0.15 * (0.1 + 0.5), 0.7 * 0.8 + 0.15 * (0.2 + 0.4)])
    assert env.true_metric(pol) == pytest.approx(expected)


def test_eval_grid_and_feature_map_shapes():
    x, y = make_synthetic_letter_data(50, seed=5)
    env = ClassificationEnv(x, y)
    grid = env.eval_grid()
    assert grid.rows.shape == (50 * 26, 17)
    # Row t*K+k pairs context t with class k.
    np.testing.assert_array_equal(grid.rows[26 + 3], np.concatenate([x[1], [3.0]]))
    fmap = env.feature_map(embed_dim=5, seed=0)
    assert fmap.raw_dim == 17
    assert fmap.feature_dim == 21

    renv = RecsysEnv(np.full((4, 7), 0.5))
    rgrid = renv.eval_grid()
    assert rgrid.rows.shape == (28, 2)
    np.testing.assert_array_equal(rgrid.rows[7 * 2 + 3], [2.0, 3.0])
    rmap = renv.feature_map(embed_dim=5, seed=0)
    assert rmap.raw_dim == 2
    assert rmap.feature_dim == 10


def test_raw_rows_layout():
    x, y = make_synthetic_letter_data(30, seed=6)
    env = ClassificationEnv(x, y)
    log = env.deploy(GreedyChoicePolicy(y, 26, 0.1), np.random.default_rng(8))
    rows = env.raw_rows(log)
    assert rows.shape == (30, 17)
    np.testing.assert_array_equal(rows[:, :16], x[log.context_indices])
    np.testing.assert_array_equal(rows[:, 16], log.actions)

    renv = RecsysEnv(np.full((5, 4), 0.3))
    rlog = renv.deploy(UniformPolicy(4), np.random.default_rng(9))
    rrows = renv.raw_rows(rlog)
    np.testing.assert_array_equal(rrows[:, 0], rlog.context_indices)
    np.testing.assert_array_equal(rrows[:, 1], rlog.actions)


def test_interaction_log_validation_and_concat():
    good = InteractionLog(np.arange(3), np.zeros(3, dtype=int), np.ones(3), np.full(3, 0.5))
    both = InteractionLog.concat([good, good])
    assert len(both) == 6
    with pytest.raises(ValueError):
        InteractionLog(np.arange(3), np.zeros(2, dtype=int), np.ones(3), np.full(3, 0.5))
    with pytest.raises(ValueError):
        InteractionLog(np.arange(2), np.zeros(2, dtype=int), np.ones(2), np.array([0.5, 0.0]))
    with pytest.raises(ValueError):
        InteractionLog.concat([])


def test_synthetic_letter_data_shapes_and_ranges():
    x, y = make_synthetic_letter_data(500, seed=7)
    assert x.shape == (500, 16) and y.shape == (500,)
    assert x.min() >= 0 and x.max() <= 15
    np.testing.assert_array_equal(x, np.rint(x))
    assert y.min() >= 0 and y.max() <= 25
    x2, _ = make_synthetic_letter_data(500, seed=7)
    np.testing.assert_array_equal(x, x2)


def test_synthetic_letter_data_mirrors_and_noise_dims():
    x, y = make_synthetic_letter_data(
        4000, seed=9, n_classes=6, modes_per_class=2,
        center_spread=3.0, within_noise=1.0, informative_dims=4)
    for k in range(6):
        cls = x[y == k]
        # Mirrored mode pairs cancel in the mean, so the class signal shows
        # up as spread, not as a shifted centroid.
        lead, tail = cls[:, :4], cls[:, 4:]
        assert np.all(np.abs(tail.mean(axis=0) - 7.5) < 0.6)
        assert lead.var(axis=0).mean() > 2 * tail.var(axis=0).mean()


def test_synthetic_ratings_shapes_and_values():
    r = make_synthetic_ratings(n_users=40, n_items=30, seed=8, density=0.2)
    assert r.shape == (40, 30)
    assert set(np.unique(r)) <= {0.0, 1.0, 2.0, 3.0, 4.0, 5.0}
    observed_frac = (r > 0).mean()
    assert 0.08 < observed_frac < 0.4


def test_letter_csv_round_trip(tmp_path):
    path = tmp_path / "letters.csv"
    path.write_text("T,2,8,3,5,1,8,13,0,6,6,10,8,0,8,0,8\nA,1,1,3,2,1,8,2,2,2,8,2,8,1,6,2,7\n")
    x, y = load_letter_csv(path)
    assert x.shape == (2, 16)
    np.testing.assert_array_equal(y, [ord("T") - 65, 0])
    bad = tmp_path / "bad.csv"
    bad.write_text("T,1,2\n")
    with pytest.raises(ValueError):
        load_letter_csv(bad)


def test_ratings_table_round_trip(tmp_path):
    path = tmp_path / "u.data"
    path.write_text("1\t1\t5\t874965758\n1\t2\t3\t876893171\n2\t1\t4\t878542960\n3\t2\t1\t874965706\n")
    full = load_ratings_table(path)
    np.testing.assert_array_equal(full, [[5, 3], [4, 0], [0, 1]])
    trimmed = load_ratings_table(path, n_users=2, n_items=1)
    np.testing.assert_array_equal(trimmed, [[5], [4]])
    empty = tmp_path / "empty.data"
    empty.write_text("")
    with pytest.raises(ValueError):
        load_ratings_table(empty)


def test_train_eval_split():
    train, rest = train_eval_split(100, 0.7, seed=1)
    assert train.size == 70 and rest.size == 30
    assert np.intersect1d(train, rest).size == 0
    assert np.union1d(train, rest).size == 100
    with pytest.raises(ValueError):
        train_eval_split(10, 0.0)
