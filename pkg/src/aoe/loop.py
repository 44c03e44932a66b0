"""The sequential deploy-model-score selection loop.

One iteration is: deploy a candidate, append its interactions to the
pooled logs, retrain the feedback surrogate from scratch on everything
collected so far, score every candidate's metric distribution on the
evaluation grid, and pick the next deployment by acquisition value among
the not-yet-deployed. The first deployment is uniform random because no
surrogate exists yet. The estimated best after any iteration is the
candidate with the highest posterior metric mean, whether or not it was
ever deployed.

Ground-truth metrics are recorded alongside for benchmark reporting;
nothing in the selection path reads them.
"""

from __future__ import annotations

import dataclasses
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .acquisition import AcquisitionConfig, score, score_samples, select_next
from .environments import InteractionLog
from .metric import PolicyMatrix, metric_gaussian, metric_samples_binary, policy_matrix
from .seeding import derive_seed
from .svgp import TrainConfig, init_svgp, train_svgp


@dataclass(frozen=True)
class SurrogateConfig:
    """How the feedback surrogate is built and scored each iteration."""

    family: str = "matern32"
    likelihood: str = "bernoulli"
    n_inducing: int = 100
    embed_dim: int = 5
    n_samples: int = 1000
    route: str = "fitc"
    warm_start: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.n_inducing < 1 or self.embed_dim < 1 or self.n_samples < 1:
            raise ValueError("n_inducing, embed_dim, and n_samples must be positive")


@dataclass(frozen=True)
class IterationRecord:
    """Everything one iteration produced."""

    iteration: int
    deployed: int
    observed_metric: float
    estimate_means: np.ndarray
    estimate_stds: np.ndarray
    acquisition_scores: np.ndarray
    estimated_best: int
    interactions: InteractionLog
    wall_time: float


@dataclass(frozen=True)
class LoopHistory:
    """Full trace of one selection run."""

    n_candidates: int
    budget: int
    seed: int
    records: tuple[IterationRecord, ...]
    true_metrics: np.ndarray | None

    @property
    def deployed_indices(self) -> list[int]:
        return [r.deployed for r in self.records]

    @property
    def estimated_best_trajectory(self) -> list[int]:
        return [r.estimated_best for r in self.records]

    def to_json(self, include_timing: bool = True) -> str:
        records = []
        for r in self.records:
            entry = {
                "iteration": r.iteration,
                "deployed": r.deployed,
                "observed_metric": r.observed_metric,
                "estimate_means": r.estimate_means.tolist(),
                "estimate_stds": r.estimate_stds.tolist(),
                "acquisition_scores": r.acquisition_scores.tolist(),
                "estimated_best": r.estimated_best,
                "interactions": {
                    "context_indices": r.interactions.context_indices.tolist(),
                    "actions": r.interactions.actions.tolist(),
                    "feedback": r.interactions.feedback.tolist(),
                    "propensities": r.interactions.propensities.tolist(),
                },
            }
            if include_timing:
                entry["wall_time"] = r.wall_time
            records.append(entry)
        payload = {
            "version": 1,
            "n_candidates": self.n_candidates,
            "budget": self.budget,
            "seed": self.seed,
            "true_metrics": None if self.true_metrics is None else self.true_metrics.tolist(),
            "records": records,
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "LoopHistory":
        payload = json.loads(text)
        if payload.get("version") != 1:
            raise ValueError(f"unsupported history version {payload.get('version')!r}")
        records = []
        for entry in payload["records"]:
            log = InteractionLog(
                context_indices=np.asarray(entry["interactions"]["context_indices"], dtype=np.int64),
                actions=np.asarray(entry["interactions"]["actions"], dtype=np.int64),
                feedback=np.asarray(entry["interactions"]["feedback"], dtype=np.float64),
                propensities=np.asarray(entry["interactions"]["propensities"], dtype=np.float64),
            )
            records.append(
                IterationRecord(
                    iteration=int(entry["iteration"]),
                    deployed=int(entry["deployed"]),
                    observed_metric=float(entry["observed_metric"]),
                    estimate_means=np.asarray(entry["estimate_means"], dtype=np.float64),
                    estimate_stds=np.asarray(entry["estimate_stds"], dtype=np.float64),
                    acquisition_scores=np.asarray(entry["acquisition_scores"], dtype=np.float64),
                    estimated_best=int(entry["estimated_best"]),
                    interactions=log,
                    wall_time=float(entry.get("wall_time", 0.0)),
                )
            )
        true_metrics = payload["true_metrics"]
        return cls(
            n_candidates=int(payload["n_candidates"]),
            budget=int(payload["budget"]),
            seed=int(payload["seed"]),
            records=tuple(records),
            true_metrics=None if true_metrics is None else np.asarray(true_metrics, dtype=np.float64),
        )


def candidate_policy_matrices(env, candidates) -> list[PolicyMatrix]:
    """Every candidate's action probabilities over the full context pool."""
    pool = np.arange(env.n_pool)
    return [policy_matrix(c.prob_columns(pool)) for c in candidates]


def clip_budget(budget: int, n_candidates: int) -> int:
    """Validate a deployment budget against the candidate count."""
    if n_candidates < 1:
        raise ValueError("at least one candidate is required")
    if budget < 1:
        raise ValueError("budget must be positive")
    if budget > n_candidates:
        warnings.warn(
            f"budget {budget} exceeds the {n_candidates} candidates; running {n_candidates} iterations",
            stacklevel=3,
        )
        return n_candidates
    return budget


def run_aoe(
    env,
    candidates,
    *,
    budget: int,
    surrogate: SurrogateConfig | None = None,
    acquisition: AcquisitionConfig | None = None,
    seed: int = 0,
    compute_true_metrics: bool = True,
    verbose: bool = False,
) -> LoopHistory:
    """Run the full selection loop for ``budget`` deployments.

    With ``surrogate.warm_start`` the previous iteration's trained model
    (feature map, inducing set, and all parameters) is the starting
    point for the next retraining pass; by default every iteration
    rebuilds and retrains from scratch.
    """
    surrogate = surrogate if surrogate is not None else SurrogateConfig()
    acquisition = acquisition if acquisition is not None else AcquisitionConfig()
    candidates = list(candidates)
    n_candidates = len(candidates)
    budget = clip_budget(budget, n_candidates)

    grid = env.eval_grid()
    matrices = candidate_policy_matrices(env, candidates)
    true_metrics = (
        np.asarray([env.true_metric(c) for c in candidates], dtype=np.float64) if compute_true_metrics else None
    )

    records: list[IterationRecord] = []
    logs: list[InteractionLog] = []
    deployed: list[int] = []
    post = None
    next_index = int(np.random.default_rng(derive_seed("first-pick", seed)).integers(n_candidates))

    for iteration in range(1, budget + 1):
        started = time.perf_counter()
        deploy_rng = np.random.default_rng(derive_seed("deploy", seed, iteration))
        log = env.deploy(candidates[next_index], deploy_rng)
        deployed.append(next_index)
        logs.append(log)

        pooled = InteractionLog.concat(logs)
        x_raw = env.raw_rows(pooled)
        if post is None or not surrogate.warm_start:
            fmap = env.feature_map(embed_dim=surrogate.embed_dim, seed=derive_seed("fmap", seed, iteration))
            post = init_svgp(
                fmap,
                surrogate.family,
                x_raw,
                n_inducing=surrogate.n_inducing,
                likelihood=surrogate.likelihood,
                seed=derive_seed("inducing", seed, iteration),
            )
        train_cfg = dataclasses.replace(surrogate.train, seed=derive_seed("train", seed, iteration))
        train_svgp(post, x_raw, pooled.feedback, train_cfg)

        incumbent = max(rec.observed_metric for rec in records) if records else -np.inf
        incumbent = max(incumbent, float(log.feedback.mean()))
        if surrogate.likelihood == "bernoulli":
            dists = metric_samples_binary(
                post,
                grid,
                matrices,
                n_samples=surrogate.n_samples,
                seed=derive_seed("score", seed, iteration),
                route=surrogate.route,
            )
            sample_bank = np.stack([d.samples for d in dists])
            means = sample_bank.mean(axis=1)
            stds = sample_bank.std(axis=1)
            scores = score_samples(sample_bank, incumbent, acquisition)
        else:
            gaussians = [metric_gaussian(post, grid, m, mode=surrogate.route if surrogate.route != "full" else "exact") for m in matrices]
            means = np.asarray([g.mean for g in gaussians])
            stds = np.asarray([g.std for g in gaussians])
            scores = score(means, stds, incumbent, acquisition)

        records.append(
            IterationRecord(
                iteration=iteration,
                deployed=next_index,
                observed_metric=float(log.feedback.mean()),
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
