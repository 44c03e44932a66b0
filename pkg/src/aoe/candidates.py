"""Candidate policies and the builders that produce pools of them.

A candidate is a stochastic decision rule over a fixed context pool: it
reports its full action-probability columns for any pool contexts (to
build policy matrices and target propensities) and can sample actions
with their propensities (to run deployments). Two concrete families
cover both benchmarks: epsilon-greedy around one chosen action per
context, and near-uniform over a per-context top set. Builders turn a
classifier grid or a collection of rating predictors into such pools.
"""

from __future__ import annotations

import numpy as np
from sklearn.metrics.pairwise import cosine_similarity
from sklearn.svm import SVC

from .seeding import derive_seed


class GreedyChoicePolicy:
    """One preferred action per context, explored with rate ``epsilon``.

    The preferred action keeps probability ``1 - epsilon``; the remaining
    mass is spread evenly over the other ``n_actions - 1`` actions.
    """

    def __init__(self, choices: np.ndarray, n_actions: int, epsilon: float):
        choices = np.asarray(choices, dtype=np.int64)
        if choices.ndim != 1 or choices.size == 0:
            raise ValueError("choices must be a non-empty 1-d integer array")
        if n_actions < 2:
            raise ValueError("need at least two actions")
        if choices.min() < 0 or choices.max() >= n_actions:
            raise ValueError("choices must lie in [0, n_actions)")
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        self.choices = choices
        self.n_actions = int(n_actions)
        self.epsilon = float(epsilon)

    @property
    def n_pool(self) -> int:
        return int(self.choices.size)

    def prob_columns(self, context_indices) -> np.ndarray:
        idx = np.asarray(context_indices, dtype=np.int64)
        other = self.epsilon / (self.n_actions - 1)
        cols = np.full((self.n_actions, idx.size), other)
        cols[self.choices[idx], np.arange(idx.size)] = 1.0 - self.epsilon
        return cols

    def sample(self, context_indices, rng: np.random.Generator):
        idx = np.asarray(context_indices, dtype=np.int64)
        chosen = self.choices[idx]
        explore = rng.random(idx.size) < self.epsilon
        actions = chosen.copy()
        n_explore = int(explore.sum())
        if n_explore:
            # Uniform over the non-preferred actions: draw in a shrunken
            # range and step over the preferred index.
            r = rng.integers(0, self.n_actions - 1, size=n_explore)
            r = r + (r >= chosen[explore])
            actions[explore] = r
        props = np.where(actions == chosen, 1.0 - self.epsilon, self.epsilon / (self.n_actions - 1))
        return actions, props


class TopFivePolicy:
    """Uniform over a per-context top set, ``epsilon`` mass elsewhere.

    Each top action carries ``(1 - epsilon) / top_k``; actions outside
    the set share ``epsilon``. When the set covers every action the
    policy is simply uniform over it.
    """

    def __init__(self, topsets: np.ndarray, n_actions: int, epsilon: float):
        topsets = np.asarray(topsets, dtype=np.int64)
        if topsets.ndim != 2 or topsets.size == 0:
            raise ValueError("topsets must be (n_pool, top_k)")
        if topsets.min() < 0 or topsets.max() >= n_actions:
            raise ValueError("topsets must lie in [0, n_actions)")
        if any(np.unique(row).size != topsets.shape[1] for row in topsets):
            raise ValueError("top sets must not repeat actions")
        if not 0.0 <= epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if topsets.shape[1] > n_actions:
            raise ValueError("top set larger than the action space")
        self.topsets = topsets
        self.n_actions = int(n_actions)
        self.top_k = int(topsets.shape[1])
        self.epsilon = float(epsilon) if n_actions > topsets.shape[1] else 0.0

    @property
    def n_pool(self) -> int:
        return int(self.topsets.shape[0])

    def prob_columns(self, context_indices) -> np.ndarray:
        idx = np.asarray(context_indices, dtype=np.int64)
        rest = self.n_actions - self.top_k
        base = self.epsilon / rest if rest else 0.0
        cols = np.full((self.n_actions, idx.size), base)
        cols[self.topsets[idx].T, np.arange(idx.size)] = (1.0 - self.epsilon) / self.top_k
        return cols

    def sample(self, context_indices, rng: np.random.Generator):
        idx = np.asarray(context_indices, dtype=np.int64)
        tops = self.topsets[idx]
        explore = rng.random(idx.size) < self.epsilon
        pick = rng.integers(0, self.top_k, size=idx.size)
        actions = tops[np.arange(idx.size), pick]
        n_explore = int(explore.sum())
        if n_explore:
            # Uniform over the complement of the top set: draw in the
            # shrunken range, then step over each forbidden index in
            # ascending order.
            r = rng.integers(0, self.n_actions - self.top_k, size=n_explore)
            forbidden = np.sort(tops[explore], axis=1)
            for j in range(self.top_k):
                r = r + (r >= forbidden[:, j])
            actions[explore] = r
        in_top = (actions[:, None] == tops).any(axis=1)
        rest = self.n_actions - self.top_k
        props = np.where(in_top, (1.0 - self.epsilon) / self.top_k, self.epsilon / rest if rest else 0.0)
        return actions, props


class UniformPolicy:
    """Every action equally likely in every context."""

    def __init__(self, n_actions: int, n_pool: int | None = None):
        if n_actions < 1:
            raise ValueError("need at least one action")
        self.n_actions = int(n_actions)
        self.n_pool = n_pool

    def prob_columns(self, context_indices) -> np.ndarray:
        idx = np.asarray(context_indices, dtype=np.int64)
        return np.full((self.n_actions, idx.size), 1.0 / self.n_actions)

    def sample(self, context_indices, rng: np.random.Generator):
        idx = np.asarray(context_indices, dtype=np.int64)
        actions = rng.integers(0, self.n_actions, size=idx.size)
        return actions, np.full(idx.size, 1.0 / self.n_actions)


def default_svm_grid(n_c: int = 20, n_gamma: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """The classic coarse search box: C in 2^[-5, 15], gamma in 2^[-15, 3]."""
    return 2.0 ** np.linspace(-5, 15, n_c), 2.0 ** np.linspace(-15, 3, n_gamma)


def build_svm_candidates(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_pool: np.ndarray,
    *,
    c_grid: np.ndarray | None = None,
    gamma_grid: np.ndarray | None = None,
    epsilon: float = 0.05,
    n_actions: int | None = None,
) -> tuple[list[GreedyChoicePolicy], list[dict]]:
    """One epsilon-greedy candidate per (C, gamma) cell of an RBF-SVM grid.

    Every classifier is fit on the training split, then frozen: its pool
    predictions become the per-context preferred actions. Returns the
    policies plus one {"c", "gamma"} record each, in row-major grid order
    (C varies slowest).
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    x_pool = np.asarray(x_pool, dtype=np.float64)
    if c_grid is None or gamma_grid is None:
        default_c, default_g = default_svm_grid()
        c_grid = default_c if c_grid is None else np.asarray(c_grid, dtype=np.float64)
        gamma_grid = default_g if gamma_grid is None else np.asarray(gamma_grid, dtype=np.float64)
    k = int(n_actions) if n_actions is not None else int(y_train.max()) + 1
    if y_train.min() < 0 or y_train.max() >= k:
        raise ValueError("labels must lie in [0, n_actions)")
    if np.unique(y_train).size < 2:
        raise ValueError("training labels contain a single class; a classifier grid needs at least two")
    policies: list[GreedyChoicePolicy] = []
    settings: list[dict] = []
    for c_value in c_grid:
        for gamma in gamma_grid:
            clf = SVC(C=float(c_value), gamma=float(gamma), kernel="rbf")
            clf.fit(x_train, y_train)
            choices = clf.predict(x_pool).astype(np.int64)
            policies.append(GreedyChoicePolicy(choices, k, epsilon))
            settings.append({"c": float(c_value), "gamma": float(gamma)})
    return policies, settings


def _observed_stats(ratings: np.ndarray) -> tuple[np.ndarray, float]:
    observed = ratings > 0
    total = ratings[observed]
    if total.size == 0:
        raise ValueError("ratings matrix has no observed entries")
    return observed, float(total.mean())


def _als_scores(ratings: np.ndarray, rank: int, *, seed: int, n_iters: int = 20, reg: float = 0.1) -> np.ndarray:
    """Alternating least squares on observed, global-mean-centered ratings."""
    observed, mean = _observed_stats(ratings)
    centered = np.where(observed, ratings - mean, 0.0)
    n_users, n_items = ratings.shape
    rng = np.random.default_rng(derive_seed("als", seed, rank))
    u = 0.1 * rng.normal(size=(n_users, rank))
    v = 0.1 * rng.normal(size=(n_items, rank))
    eye = reg * np.eye(rank)
    for _ in range(n_iters):
        for row in range(n_users):
            mask = observed[row]
            if not mask.any():
                u[row] = 0.0
                continue
            vm = v[mask]
            u[row] = np.linalg.solve(vm.T @ vm + eye, vm.T @ centered[row, mask])
        for col in range(n_items):
            mask = observed[:, col]
            if not mask.any():
                v[col] = 0.0
                continue
            um = u[mask]
            v[col] = np.linalg.solve(um.T @ um + eye, um.T @ centered[mask, col])
    return mean + u @ v.T


def _knn_user_scores(ratings: np.ndarray, k: int) -> np.ndarray:
    """Neighborhood predictor: cosine similarity over mean-filled rows."""
    observed, mean = _observed_stats(ratings)
    row_counts = observed.sum(axis=1)
    row_means = np.where(row_counts > 0, ratings.sum(axis=1) / np.maximum(row_counts, 1), mean)
    filled = np.where(observed, ratings, row_means[:, None])
    sims = cosine_similarity(filled)
    np.fill_diagonal(sims, -np.inf)
    scores = np.empty_like(filled)
    for row in range(filled.shape[0]):
        neighbors = np.argsort(-sims[row], kind="stable")[:k]
        weights = np.clip(sims[row, neighbors], 0.0, None)
        if weights.sum() <= 0:
            scores[row] = row_means[row]
        else:
            scores[row] = weights @ filled[neighbors] / weights.sum()
    return scores


def top_sets(scores: np.ndarray, top_k: int) -> np.ndarray:
    """Per-row indices of the ``top_k`` largest scores, ties to low index."""
    return np.argsort(-scores, axis=1, kind="stable")[:, :top_k]


def build_rating_candidates(
    ratings: np.ndarray,
    *,
    epsilon: float = 0.05,
    top_k: int = 5,
    factor_ranks: tuple[int, ...] = (1, 2, 4, 8),
    knn_sizes: tuple[int, ...] = (5, 20),
    seed: int = 0,
) -> tuple[list, list[str]]:
    """The standard pool of rating predictors turned into policies.

    Global/user/item means, alternating-least-squares factor models at
    several ranks, user-neighborhood predictors, and a uniform-random
    baseline. Every scored predictor recommends its per-user top
    ``top_k`` items with ``1 - epsilon`` total probability.
    """
    ratings = np.asarray(ratings, dtype=np.float64)
    if ratings.ndim != 2:
        raise ValueError("ratings must be a (users, items) matrix")
    n_users, n_items = ratings.shape
    observed, mean = _observed_stats(ratings)
    col_counts = observed.sum(axis=0)
    col_means = np.where(col_counts > 0, ratings.sum(axis=0) / np.maximum(col_counts, 1), mean)
    row_counts = observed.sum(axis=1)
    row_means = np.where(row_counts > 0, ratings.sum(axis=1) / np.maximum(row_counts, 1), mean)

    scored: list[tuple[str, np.ndarray]] = [
        ("global_mean", np.full((n_users, n_items), mean)),
        ("user_mean", np.tile(row_means[:, None], (1, n_items))),
        ("item_mean", np.tile(col_means[None, :], (n_users, 1))),
    ]
    for rank in factor_ranks:
        scored.append((f"factor_rank{rank}", _als_scores(ratings, rank, seed=seed)))
    for k in knn_sizes:
        scored.append((f"knn_user{k}", _knn_user_scores(ratings, k)))

    policies: list = []
    names: list[str] = []
    for name, scores in scored:
        policies.append(TopFivePolicy(top_sets(scores, top_k), n_items, epsilon))
        names.append(name)
    policies.append(UniformPolicy(n_items, n_pool=n_users))
    names.append("uniform_random")
    return policies, names
