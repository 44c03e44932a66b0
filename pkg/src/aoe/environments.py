"""Simulated deployments that stand in for live experiments.

An environment owns the ground truth (labels, or a matrix of preference
rates), runs a candidate policy for a fixed number of interactions, and
logs what a production system would log: which context came in, what was
shown, the binary feedback, and the propensity of the shown action. It
also computes each policy's exact long-run metric, which benchmarks use
for evaluation only; no selection method may peek at it.

Environments also provide the glue the surrogate needs: the evaluation
grid over their context pool, a matching feature map, and the raw design
rows for any interaction log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import EmbeddingTable, FeatureMap
from .metric import EvalGrid
from .seeding import derive_seed

RATING_INTERCEPT = 0.05
RATING_SLOPE = 0.18


@dataclass(frozen=True)
class InteractionLog:
    """What one deployment leaves behind.

    Contexts are stored as indices into the environment's pool, so
    target-policy probabilities stay cheap to look up later.
    """

    context_indices: np.ndarray
    actions: np.ndarray
    feedback: np.ndarray
    propensities: np.ndarray

    def __post_init__(self) -> None:
        n = self.context_indices.shape[0]
        for name in ("actions", "feedback", "propensities"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must match context_indices length {n}")
        if np.any(self.propensities <= 0.0) or np.any(self.propensities > 1.0):
            raise ValueError("propensities must lie in (0, 1]")

    def __len__(self) -> int:
        return int(self.context_indices.shape[0])

    @classmethod
    def concat(cls, logs) -> "InteractionLog":
        logs = list(logs)
        if not logs:
            raise ValueError("nothing to concatenate")
        return cls(
            context_indices=np.concatenate([log.context_indices for log in logs]),
            actions=np.concatenate([log.actions for log in logs]),
            feedback=np.concatenate([log.feedback for log in logs]),
            propensities=np.concatenate([log.propensities for log in logs]),
        )


class ClassificationEnv:
    """Online classification: feedback is 1 when the shown class is right.

    Each deployment samples ``rounds`` contexts from the pool without
    replacement, lets the policy pick classes, and records the hits.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, *, n_actions: int | None = None, rounds: int = 200):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise ValueError("features must be (n, d) with one label per row")
        k = int(n_actions) if n_actions is not None else int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= k:
            raise ValueError("labels must lie in [0, n_actions)")
        if rounds < 1:
            raise ValueError("rounds must be positive")
        self.features = features
        self.labels = labels
        self.n_actions = k
        self.rounds = int(rounds)

    @property
    def n_pool(self) -> int:
        return int(self.features.shape[0])

    def deploy(self, policy, rng: np.random.Generator) -> InteractionLog:
        size = min(self.rounds, self.n_pool)
        idx = rng.choice(self.n_pool, size=size, replace=False)
        actions, props = policy.sample(idx, rng)
        feedback = (actions == self.labels[idx]).astype(np.float64)
        return InteractionLog(idx, actions, feedback, props)

    def true_metric(self, policy) -> float:
        cols = policy.prob_columns(np.arange(self.n_pool))
        return float(cols[self.labels, np.arange(self.n_pool)].mean())

    def eval_grid(self) -> EvalGrid:
        actions = np.arange(self.n_actions, dtype=np.float64).reshape(-1, 1)
        return EvalGrid.from_parts(self.features, actions)

    def feature_map(self, *, embed_dim: int = 5, seed: int = 0) -> FeatureMap:
        table = EmbeddingTable(
            "action", np.arange(self.n_actions), embed_dim, seed=derive_seed("embed-action", seed)
        )
        return FeatureMap(numeric_dim=self.features.shape[1], tables=[table])

    def raw_rows(self, log: InteractionLog) -> np.ndarray:
        return np.hstack([self.features[log.context_indices], log.actions[:, None].astype(np.float64)])


class RecsysEnv:
    """Recommendation with one-item slates and known preference rates.

    Context t is user t; every deployment gives each user
    ``rounds_per_user`` independent rounds, and feedback is a Bernoulli
    draw of the true preference rate for the shown item.
    """

    def __init__(self, rates: np.ndarray, *, rounds_per_user: int = 5):
        rates = np.asarray(rates, dtype=np.float64)
        if rates.ndim != 2 or rates.size == 0:
            raise ValueError("rates must be a non-empty (users, items) matrix")
        if np.any(rates < 0.0) or np.any(rates > 1.0):
            raise ValueError("rates must lie in [0, 1]")
        if rounds_per_user < 1:
            raise ValueError("rounds_per_user must be positive")
        self.rates = rates
        self.rounds_per_user = int(rounds_per_user)

    @property
    def n_users(self) -> int:
        return int(self.rates.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.rates.shape[1])

    @property
    def n_pool(self) -> int:
        return self.n_users

    @property
    def n_actions(self) -> int:
        return self.n_items

    def deploy(self, policy, rng: np.random.Generator) -> InteractionLog:
        idx = np.repeat(np.arange(self.n_users), self.rounds_per_user)
        actions, props = policy.sample(idx, rng)
        feedback = (rng.random(idx.size) < self.rates[idx, actions]).astype(np.float64)
        return InteractionLog(idx, actions, feedback, props)

    def true_metric(self, policy) -> float:
        cols = policy.prob_columns(np.arange(self.n_users))
        return float((cols.T * self.rates).sum(axis=1).mean())

    def eval_grid(self) -> EvalGrid:
        users = np.arange(self.n_users, dtype=np.float64).reshape(-1, 1)
        items = np.arange(self.n_items, dtype=np.float64).reshape(-1, 1)
        return EvalGrid.from_parts(users, items)

    def feature_map(self, *, embed_dim: int = 5, seed: int = 0) -> FeatureMap:
        users = EmbeddingTable("user", np.arange(self.n_users), embed_dim, seed=derive_seed("embed-user", seed))
        items = EmbeddingTable("item", np.arange(self.n_items), embed_dim, seed=derive_seed("embed-item", seed))
        return FeatureMap(numeric_dim=0, tables=[users, items])

    def raw_rows(self, log: InteractionLog) -> np.ndarray:
        return np.column_stack([log.context_indices, log.actions]).astype(np.float64)


def ratings_to_rates(ratings: np.ndarray) -> np.ndarray:
    """Affine map from the 0..5 rating scale to preference rates.

    Unrated (0) becomes 0.05 and each star adds 0.18, so a five-star
    item is liked 95% of the time.
    """
    ratings = np.asarray(ratings, dtype=np.float64)
    if np.any(ratings < 0.0) or np.any(ratings > 5.0):
        raise ValueError("ratings must lie in [0, 5]")
    return RATING_INTERCEPT + RATING_SLOPE * ratings


def rates_to_ratings(rates: np.ndarray) -> np.ndarray:
    """Inverse of the rating map; defined on [0.05, 0.95]."""
    rates = np.asarray(rates, dtype=np.float64)
    ratings = (rates - RATING_INTERCEPT) / RATING_SLOPE
    if np.any(ratings < -1e-9) or np.any(ratings > 5.0 + 1e-9):
        raise ValueError("rates must lie in [0.05, 0.95]")
    return np.clip(ratings, 0.0, 5.0)


def build_recsys_env(
    ratings: np.ndarray,
    *,
    item_threshold: float = 0.2,
    threshold_scale: str = "rating",
    rounds_per_user: int = 5,
    train_fraction: float = 0.2,
    seed: int = 0,
) -> tuple[RecsysEnv, np.ndarray, np.ndarray]:
    """Environment from a ratings matrix, dropping unpopular items.

    The filter keeps items whose column mean (zeros included) reaches the
    threshold, measured on the raw rating scale by default or on the
    preference-rate scale with ``threshold_scale='probability'``. The
    environment sees the full filtered table; candidate builders get only
    a random ``train_fraction`` of its cells (the rest zeroed out), so
    candidates never train on the complete truth. Returns the
    environment, the training table, and the surviving item indices.
    """
    ratings = np.asarray(ratings, dtype=np.float64)
    if ratings.ndim != 2 or ratings.size == 0:
        raise ValueError("ratings must be a non-empty (users, items) matrix")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError("train_fraction must lie in (0, 1]")
    if threshold_scale == "rating":
        keep = ratings.mean(axis=0) >= item_threshold
    elif threshold_scale == "probability":
        keep = ratings_to_rates(ratings).mean(axis=0) >= item_threshold
    else:
        raise ValueError(f"unknown threshold_scale {threshold_scale!r}, expected rating or probability")
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        raise ValueError("item filter removed every item; lower the threshold")
    filtered = ratings[:, kept]
    if train_fraction < 1.0:
        rng = np.random.default_rng(derive_seed("recsys-train-split", seed))
        mask = rng.random(filtered.shape) < train_fraction
        training = np.where(mask, filtered, 0.0)
    else:
        training = filtered.copy()
    env = RecsysEnv(ratings_to_rates(filtered), rounds_per_user=rounds_per_user)
    return env, training, kept
