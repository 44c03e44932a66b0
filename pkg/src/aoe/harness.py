"""Experiment orchestration: configs, batch runs, and summary reports.

A config names an environment kind, the candidate grid, the methods to
compare, and how many seeded repetitions to run. ``run_experiment``
materializes the problem once, runs every (method, repetition) pair with
a seed derived from the master seed, and writes one JSON history per run
plus a CSV summarizing the benchmark quantities per iteration:

- gap: true metric of the actually best candidate minus the true metric
  of the estimated best, and
- rmse: root mean squared error of the estimated metric means against
  the true metrics across all candidates.

Output layout under ``out_dir``::

    <experiment>/meta.json
    <experiment>/<method>/run_<i>.json
    <experiment>/summary.csv
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import AcquisitionConfig
from .baselines import METHODS as BASELINE_METHODS
from .baselines import onehot_bo_features, run_baseline, svm_bo_features
from .candidates import build_rating_candidates, build_svm_candidates, default_svm_grid
from .data import (
    load_letter_csv,
    load_ratings_table,
    make_synthetic_letter_data,
    make_synthetic_ratings,
    train_eval_split,
)
from .environments import ClassificationEnv, build_recsys_env
from .loop import LoopHistory, SurrogateConfig, run_aoe
from .seeding import derive_seed
from .svgp import TrainConfig

ALL_METHODS = ("aoe",) + BASELINE_METHODS
KINDS = ("classification", "recsys")

# Shorthand method names accepted in configs, mapped to the canonical ids.
_METHOD_ALIASES = {
    "aoe": "aoe",
    "bo": "bo",
    "is-greedy": "is-greedy",
    "is-g": "is-greedy",
    "is-ei": "is-ei",
    "dr-greedy": "dr-greedy",
    "dr-g": "dr-greedy",
    "dr-ei": "dr-ei",
}

SUMMARY_HEADER = "method,iteration,gap_mean,gap_std,rmse_mean,rmse_std"

_CLASSIFICATION_DATA_DEFAULTS = {
    "source": "synthetic",
    "path": None,
    "n_train": 200,
    "n_pool": 200,
    "n_classes": 26,
    "modes_per_class": 3,
    "center_spread": 2.6,
    "within_noise": 1.1,
    "informative_dims": 16,
    "rounds": 150,
    "n_c": 6,
    "n_gamma": 6,
    "epsilon": 0.05,
    "seed": 0,
}

_RECSYS_DATA_DEFAULTS = {
    "source": "synthetic",
    "path": None,
    "n_users": 60,
    "n_items": 40,
    "density": 0.12,
    "rounds_per_user": 5,
    "item_threshold": 0.2,
    "threshold_scale": "rating",
    "train_fraction": 0.2,
    "epsilon": 0.05,
    "top_k": 5,
    "seed": 0,
}


class ConfigError(ValueError):
    """The experiment config is malformed or inconsistent."""


class DataError(ValueError):
    """The referenced dataset is missing or unreadable."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one benchmark experiment."""

    experiment: str
    kind: str
    methods: tuple[str, ...]
    budget: int
    n_runs: int
    master_seed: int = 0
    out_dir: str = "out"
    n_workers: int = 1
    data: dict = field(default_factory=dict)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    schema_version: int = 1

    def __post_init__(self) -> None:
        if self.schema_version != 1:
            raise ConfigError(f"unsupported schema_version {self.schema_version!r}")
        if not self.experiment or "/" in self.experiment or "\\" in self.experiment:
            raise ConfigError("experiment must be a non-empty name without path separators")
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        normalized = []
        for method in self.methods:
            canonical = _METHOD_ALIASES.get(method.lower()) if isinstance(method, str) else None
            if canonical is None:
                raise ConfigError(f"unknown method {method!r}; choose from {ALL_METHODS}")
            normalized.append(canonical)
        if len(set(normalized)) != len(normalized):
            raise ConfigError("methods must not repeat")
        object.__setattr__(self, "methods", tuple(normalized))
        if self.budget < 1 or self.n_runs < 1:
            raise ConfigError("budget and n_runs must be positive")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be positive")
        defaults = _CLASSIFICATION_DATA_DEFAULTS if self.kind == "classification" else _RECSYS_DATA_DEFAULTS
        unknown = set(self.data) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown data keys for kind {self.kind!r}: {sorted(unknown)}")
        merged = {**defaults, **self.data}
        if merged["source"] not in ("synthetic", "csv"):
            raise ConfigError("data.source must be 'synthetic' or 'csv'")
        if merged["source"] == "csv" and not merged["path"]:
            raise ConfigError("data.source 'csv' requires data.path")
        object.__setattr__(self, "data", merged)

    def to_dict(self) -> dict:
        payload = dataclasses.asdict(self)
        payload["methods"] = list(self.methods)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError("config must be a JSON object")
        payload = dict(payload)
        try:
            surrogate = payload.pop("surrogate", None)
            if isinstance(surrogate, dict):
                surrogate = dict(surrogate)
                train = surrogate.pop("train", None)
                if isinstance(train, dict):
                    surrogate["train"] = TrainConfig(**train)
                surrogate = SurrogateConfig(**surrogate)
            acquisition = payload.pop("acquisition", None)
            if isinstance(acquisition, dict):
                acquisition = AcquisitionConfig(**acquisition)
            methods = payload.pop("methods", None)
            if methods is not None:
                payload["methods"] = tuple(methods)
            if surrogate is not None:
                payload["surrogate"] = surrogate
            if acquisition is not None:
                payload["acquisition"] = acquisition
            return cls(**payload)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(payload)


def default_config(kind: str, experiment: str | None = None) -> ExperimentConfig:
    """A small synthetic-data demo config for either environment kind."""
    if kind == "classification":
        return ExperimentConfig(
            experiment=experiment or "letters-demo",
            kind="classification",
            methods=("aoe", "dr-ei", "bo"),
            budget=8,
            n_runs=2,
            surrogate=SurrogateConfig(
                family="matern32",
                n_inducing=100,
                n_samples=400,
                train=TrainConfig(epochs=60, batch_size=256, lr=0.01),
            ),
        )
    if kind == "recsys":
        return ExperimentConfig(
            experiment=experiment or "ratings-demo",
            kind="recsys",
            methods=("aoe", "dr-ei", "bo"),
            budget=5,
            n_runs=2,
            surrogate=SurrogateConfig(
                family="rbf",
                n_inducing=100,
                n_samples=400,
                train=TrainConfig(epochs=60, batch_size=256, lr=0.01),
            ),
        )
    raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")


@dataclass(frozen=True)
class Problem:
    """A fully materialized environment plus its candidate pool."""

    env: object
    candidates: list
    names: list[str]
    bo_features: np.ndarray


def _build_classification_problem(data: dict) -> Problem:
    if data["source"] == "synthetic":
        features, labels = make_synthetic_letter_data(
            data["n_train"] + data["n_pool"],
            seed=data["seed"],
            n_classes=data["n_classes"],
            modes_per_class=data["modes_per_class"],
            center_spread=data["center_spread"],
            within_noise=data["within_noise"],
            informative_dims=data["informative_dims"],
        )
    else:
        try:
            features, labels = load_letter_csv(data["path"])
        except OSError as exc:
            raise DataError(f"cannot read dataset {data['path']}: {exc}") from exc
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    total = features.shape[0]
    want = data["n_train"] + data["n_pool"]
    if total < want:
        raise DataError(f"dataset has {total} rows, need {want}")
    frac = data["n_train"] / want
    train_idx, pool_idx = train_eval_split(want, frac, seed=derive_seed("split", data["seed"]))
    x_train, y_train = features[train_idx], labels[train_idx]
    x_pool, y_pool = features[pool_idx], labels[pool_idx]
    c_grid, gamma_grid = default_svm_grid(data["n_c"], data["n_gamma"])
    candidates, infos = build_svm_candidates(
        x_train, y_train, x_pool, c_grid=c_grid, gamma_grid=gamma_grid, epsilon=data["epsilon"]
    )
    env = ClassificationEnv(x_pool, y_pool, n_actions=data["n_classes"], rounds=data["rounds"])
    names = [f"svm_c{info['c']:g}_g{info['gamma']:g}" for info in infos]
    return Problem(env=env, candidates=candidates, names=names, bo_features=svm_bo_features(infos))


def _build_recsys_problem(data: dict) -> Problem:
    if data["source"] == "synthetic":
        ratings = make_synthetic_ratings(
            n_users=data["n_users"], n_items=data["n_items"], seed=data["seed"], density=data["density"]
        )
    else:
        try:
            ratings = load_ratings_table(data["path"], n_users=data["n_users"], n_items=data["n_items"])
        except OSError as exc:
            raise DataError(f"cannot read dataset {data['path']}: {exc}") from exc
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    env, training, _ = build_recsys_env(
        ratings,
        item_threshold=data["item_threshold"],
        threshold_scale=data["threshold_scale"],
        rounds_per_user=data["rounds_per_user"],
        train_fraction=data["train_fraction"],
        seed=data["seed"],
    )
    candidates, names = build_rating_candidates(
        training,
        epsilon=data["epsilon"],
        top_k=data["top_k"],
        seed=derive_seed("candidates", data["seed"]),
    )
    return Problem(env=env, candidates=candidates, names=names, bo_features=onehot_bo_features(len(candidates)))


def build_problem(config: ExperimentConfig) -> Problem:
    if config.kind == "classification":
        return _build_classification_problem(config.data)
    return _build_recsys_problem(config.data)


def _run_one(problem: Problem, config: ExperimentConfig, method: str, seed: int) -> LoopHistory:
    if method == "aoe":
        return run_aoe(
            problem.env,
            problem.candidates,
            budget=config.budget,
            surrogate=config.surrogate,
            acquisition=config.acquisition,
            seed=seed,
        )
    return run_baseline(
        problem.env,
        problem.candidates,
        method,
        budget=config.budget,
        seed=seed,
        candidate_features=problem.bo_features if method == "bo" else None,
        acquisition=config.acquisition,
    )


def run_experiment(config: ExperimentConfig, verbose: bool = True) -> Path:
    """Run every (method, repetition) pair and write histories plus the summary."""
    problem = build_problem(config)
    exp_dir = Path(config.out_dir) / config.experiment
    exp_dir.mkdir(parents=True, exist_ok=True)

    true_metrics = [float(problem.env.true_metric(c)) for c in problem.candidates]
    meta = {
        "schema_version": 1,
        "config": config.to_dict(),
        "candidates": problem.names,
        "true_metrics": true_metrics,
    }
    (exp_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    tasks = [
        (method, i, derive_seed(config.master_seed, method, i))
        for method in config.methods
        for i in range(config.n_runs)
    ]
    for method in config.methods:
        (exp_dir / method).mkdir(exist_ok=True)

    def finish(method: str, i: int, seed: int, history: LoopHistory) -> None:
        (exp_dir / method / f"run_{i}.json").write_text(history.to_json())
        if verbose:
            final = history.records[-1]
            print(
                f"{config.experiment}: {method} run {i + 1}/{config.n_runs} "
                f"(seed {seed}) best={problem.names[final.estimated_best]}",
                flush=True,
            )

    if config.n_workers > 1:
        with ThreadPoolExecutor(max_workers=config.n_workers) as pool:
            futures = [pool.submit(_run_one, problem, config, method, seed) for method, i, seed in tasks]
            for (method, i, seed), future in zip(tasks, futures):
                finish(method, i, seed, future.result())
    else:
        for method, i, seed in tasks:
            finish(method, i, seed, _run_one(problem, config, method, seed))

    summarize_experiment(exp_dir)
    return exp_dir


def _load_runs(exp_dir: Path, method: str) -> list[LoopHistory]:
    method_dir = exp_dir / method
    paths = sorted(method_dir.glob("run_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise DataError(f"no run files under {method_dir}")
    return [LoopHistory.from_json(p.read_text()) for p in paths]


def summarize_experiment(exp_dir) -> list[dict]:
    """Aggregate run histories into per-iteration rows and write summary.csv."""
    exp_dir = Path(exp_dir)
    try:
        meta = json.loads((exp_dir / "meta.json").read_text())
    except OSError as exc:
        raise DataError(f"cannot read {exp_dir / 'meta.json'}: {exc}") from exc
    methods = meta["config"]["methods"]

    rows = []
    for method in methods:
        histories = _load_runs(exp_dir, method)
        budgets = {len(h.records) for h in histories}
        if len(budgets) != 1:
            raise DataError(f"runs for {method} disagree on iteration count: {sorted(budgets)}")
        budget = budgets.pop()
        for h in histories:
            if h.true_metrics is None:
                raise DataError(f"run histories for {method} lack true metrics")
        for iteration in range(1, budget + 1):
            gaps = []
            rmses = []
            for h in histories:
                record = h.records[iteration - 1]
                truth = h.true_metrics
                gaps.append(float(truth.max() - truth[record.estimated_best]))
                rmses.append(float(np.sqrt(np.mean((record.estimate_means - truth) ** 2))))
            gaps = np.asarray(gaps)
            rmses = np.asarray(rmses)
            rows.append(
                {
                    "method": method,
                    "iteration": iteration,
                    "gap_mean": float(gaps.mean()),
                    "gap_std": float(gaps.std(ddof=0)),
                    "rmse_mean": float(rmses.mean()),
                    "rmse_std": float(rmses.std(ddof=0)),
                }
            )

    lines = [SUMMARY_HEADER]
    for row in rows:
        lines.append(
            f"{row['method']},{row['iteration']},{row['gap_mean']!r},{row['gap_std']!r},"
            f"{row['rmse_mean']!r},{row['rmse_std']!r}"
        )
    (exp_dir / "summary.csv").write_text("\n".join(lines) + "\n")
    return rows
