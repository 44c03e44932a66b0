"""Comparison methods: off-policy estimators and metric-level Bayesian search.

The off-policy route reuses the pooled interaction logs to score every
candidate without deploying it: importance sampling reweights logged
feedback by the probability ratio of the target and logging policies,
and the doubly robust variant adds a fitted reward model that soaks up
variance while the correction term keeps the estimate unbiased.

The Bayesian-optimization route ignores the logs entirely. It fits an
exact GP to the observed metric of each deployed candidate, indexed by a
feature vector describing the candidate itself, and picks the next
deployment by expected improvement on that surface.

All routes share the deploy-and-select skeleton of the main loop and
return the same history type, so downstream reporting is uniform.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from sklearn.impute import KNNImputer
from sklearn.linear_model import LogisticRegression

from .acquisition import AcquisitionConfig, score, select_next
from .environments import ClassificationEnv, InteractionLog, RecsysEnv
from .gp_exact import fit_exact, fit_hyperparameters
from .kernels import KernelParams
from .loop import IterationRecord, LoopHistory, candidate_policy_matrices, clip_budget
from .metric import PolicyMatrix
from .seeding import derive_seed

METHODS = ("bo", "is-greedy", "is-ei", "dr-greedy", "dr-ei")


@dataclass(frozen=True)
class OpeEstimate:
    """An off-policy value estimate with its variance and effective sample size."""

    mean: float
    variance: float
    ess: float

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


def _summarize(terms: np.ndarray, weights: np.ndarray) -> OpeEstimate:
    n = terms.size
    mean = float(terms.mean())
    variance = float(terms.var(ddof=1) / n) if n > 1 else 0.0
    weight_sq = float((weights**2).sum())
    ess = float(weights.sum() ** 2 / weight_sq) if weight_sq > 0.0 else 0.0
    return OpeEstimate(mean=mean, variance=variance, ess=ess)


def _target_probabilities(log: InteractionLog, policy: PolicyMatrix) -> np.ndarray:
    matrix = policy.matrix
    if log.context_indices.max(initial=-1) >= matrix.shape[1]:
        raise ValueError("log refers to contexts outside the policy's pool")
    return matrix[log.actions, log.context_indices]


def is_estimate(log: InteractionLog, policy: PolicyMatrix) -> OpeEstimate:
    """Importance-sampling value of ``policy`` from logged interactions."""
    if len(log) == 0:
        raise ValueError("cannot estimate from an empty log")
    weights = _target_probabilities(log, policy) / log.propensities
    return _summarize(weights * log.feedback, weights)


def dr_estimate(log: InteractionLog, policy: PolicyMatrix, reward_matrix: np.ndarray) -> OpeEstimate:
    """Doubly robust value of ``policy`` using a fitted reward model.

    ``reward_matrix[t, a]`` predicts the feedback for action ``a`` at pool
    context ``t``. With an all-zero model this reduces exactly to
    importance sampling.
    """
    if len(log) == 0:
        raise ValueError("cannot estimate from an empty log")
    matrix = policy.matrix
    reward_matrix = np.asarray(reward_matrix, dtype=np.float64)
    if reward_matrix.shape != (matrix.shape[1], matrix.shape[0]):
        raise ValueError(
            f"reward matrix must be (n_contexts, n_actions) = {(matrix.shape[1], matrix.shape[0])}, "
            f"got {reward_matrix.shape}"
        )
    ctx = log.context_indices
    weights = _target_probabilities(log, policy) / log.propensities
    direct = (matrix[:, ctx] * reward_matrix[ctx].T).sum(axis=0)
    residual = weights * (log.feedback - reward_matrix[ctx, log.actions])
    return _summarize(direct + residual, weights)


def classification_reward_matrix(env: ClassificationEnv, log: InteractionLog) -> np.ndarray:
    """Predict feedback for every (context, action) pair from logged hits.

    A hit reveals the context's label, so the positives train a
    multinomial logistic classifier whose class probabilities serve as
    the predicted feedback. Actions never seen as hits predict zero.
    """
    matrix = np.zeros((env.n_pool, env.n_actions))
    hits = log.feedback > 0.5
    if not np.any(hits):
        return matrix
    revealed = log.actions[hits]
    classes = np.unique(revealed)
    if classes.size == 1:
        matrix[:, classes[0]] = 1.0
        return matrix
    model = LogisticRegression(max_iter=1000)
    model.fit(env.features[log.context_indices[hits]], revealed)
    matrix[:, model.classes_] = model.predict_proba(env.features)
    return matrix


def recsys_reward_matrix(env: RecsysEnv, log: InteractionLog, n_neighbors: int = 5) -> np.ndarray:
    """Predict feedback per (user, item) by nearest-neighbor imputation.

    Observed cells hold the mean logged feedback; missing cells are
    filled from the most similar users.
    """
    shape = (env.n_pool, env.n_actions)
    sums = np.zeros(shape)
    counts = np.zeros(shape)
    np.add.at(sums, (log.context_indices, log.actions), log.feedback)
    np.add.at(counts, (log.context_indices, log.actions), 1.0)
    observed = counts > 0
    if not observed.any():
        return np.zeros(shape)
    matrix = np.full(shape, np.nan)
    matrix[observed] = sums[observed] / counts[observed]
    if observed.all():
        return matrix
    imputer = KNNImputer(n_neighbors=min(n_neighbors, env.n_pool), keep_empty_features=True)
    return imputer.fit_transform(matrix)


def svm_bo_features(infos) -> np.ndarray:
    """Standardized (log2 C, log2 gamma) coordinates for a grid of SVM settings."""
    raw = np.array([[np.log2(info["c"]), np.log2(info["gamma"])] for info in infos])
    scale = raw.std(axis=0)
    return (raw - raw.mean(axis=0)) / np.where(scale > 1e-12, scale, 1.0)


def onehot_bo_features(n_candidates: int) -> np.ndarray:
    """Indicator coordinates for an unstructured candidate pool."""
    return np.eye(n_candidates)


def _resolve_reward_builder(env, reward_model, n_neighbors):
    if callable(reward_model):
        return lambda log: reward_model(env, log)
    if reward_model != "auto":
        raise ValueError("reward_model must be 'auto' or a callable(env, log)")
    if isinstance(env, ClassificationEnv):
        return lambda log: classification_reward_matrix(env, log)
    if isinstance(env, RecsysEnv):
        return lambda log: recsys_reward_matrix(env, log, n_neighbors=n_neighbors)
    raise ValueError("cannot infer a reward model for this environment; pass a callable")


def run_baseline(
    env,
    candidates,
    method: str,
    *,
    budget: int,
    seed: int = 0,
    candidate_features: np.ndarray | None = None,
    acquisition: AcquisitionConfig | None = None,
    reward_model="auto",
    knn_neighbors: int = 5,
    compute_true_metrics: bool = True,
    verbose: bool = False,
) -> LoopHistory:
    """Run one comparison method for ``budget`` deployments.

    ``candidate_features`` is required for ``"bo"`` and ignored otherwise.
    The first deployment is uniform random under the same seed stream as
    the main loop, so paired runs start from the same candidate.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    candidates = list(candidates)
    n_candidates = len(candidates)
    budget = clip_budget(budget, n_candidates)
    acquisition = acquisition if acquisition is not None else AcquisitionConfig()

    if method == "bo":
        if candidate_features is None:
            raise ValueError("method 'bo' requires candidate_features")
        features = np.asarray(candidate_features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n_candidates:
            raise ValueError("candidate_features must be (n_candidates, d)")
        matrices = None
        reward_builder = None
    else:
        features = None
        matrices = candidate_policy_matrices(env, candidates)
        estimator, selector = method.split("-")
        reward_builder = (
            _resolve_reward_builder(env, reward_model, knn_neighbors) if estimator == "dr" else None
        )

    true_metrics = (
        np.asarray([env.true_metric(c) for c in candidates], dtype=np.float64) if compute_true_metrics else None
    )

    records: list[IterationRecord] = []
    logs: list[InteractionLog] = []
    deployed: list[int] = []
    observed: list[float] = []
    next_index = int(np.random.default_rng(derive_seed("first-pick", seed)).integers(n_candidates))

    for iteration in range(1, budget + 1):
        started = time.perf_counter()
        deploy_rng = np.random.default_rng(derive_seed("deploy", seed, iteration))
        log = env.deploy(candidates[next_index], deploy_rng)
        deployed.append(next_index)
        logs.append(log)
        observed.append(float(log.feedback.mean()))
        incumbent = max(observed)

        if method == "bo":
            x_obs = features[deployed]
            y_obs = np.asarray(observed)
            if len(deployed) >= 2:
                params, noise = fit_hyperparameters(
                    "matern52", x_obs, y_obs, restarts=4, seed=derive_seed("bo-fit", seed, iteration)
                )
            else:
                params = KernelParams("matern52", 0.25, (1.0,) * features.shape[1])
                noise = 1e-3
            gp = fit_exact(params, noise, x_obs, y_obs)
            means, variances = gp.predict(features)
            stds = np.sqrt(variances)
            scores = score(means, stds, incumbent, acquisition)
        else:
            pooled = InteractionLog.concat(logs)
            if estimator == "is":
                estimates = [is_estimate(pooled, m) for m in matrices]
            else:
                reward_matrix = reward_builder(pooled)
                estimates = [dr_estimate(pooled, m, reward_matrix) for m in matrices]
            means = np.asarray([e.mean for e in estimates])
            stds = np.asarray([e.std for e in estimates])
            scores = score(means, stds, incumbent, acquisition) if selector == "ei" else means.copy()

        records.append(
            IterationRecord(
                iteration=iteration,
                deployed=next_index,
                observed_metric=observed[-1],
                estimate_means=means,
                estimate_stds=stds,
                acquisition_scores=scores,
                estimated_best=int(np.argmax(means)),
                interactions=log,
                wall_time=time.perf_counter() - started,
            )
        )
        if verbose:
            record = records[-1]
            print(
                f"[iter {iteration}/{budget}] deployed={record.deployed} "
                f"observed={record.observed_metric:.4f} best={record.estimated_best} "
                f"({record.wall_time:.1f}s)",
                flush=True,
            )
        if iteration < budget:
            next_index = select_next(scores, deployed)

    return LoopHistory(
        n_candidates=n_candidates,
        budget=budget,
        seed=seed,
        records=tuple(records),
        true_metrics=true_metrics,
    )
