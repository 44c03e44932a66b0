"""Distribution of an experiment's final metric under the surrogate.

A deployed policy interacts with contexts drawn from a pool; its final
accumulative metric is the average immediate feedback it collects. Given
a surrogate posterior over the feedback function on the full grid of
(context, action) pairs, every candidate policy's metric becomes a
random variable: a Gaussian in closed form for regression feedback, or a
sampled distribution when binary feedback passes through the logistic
link. Policies enter only through their matrix of action probabilities,
so one posterior scores any number of candidates.

Grid layout: row ``t * K + k`` of :class:`EvalGrid` pairs context ``t``
with action ``k``, matching the column-major flattening of the (K, T)
policy matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .kernels import kernel_tensor, robust_cholesky
from .seeding import derive_seed
from .svgp import SvgpPosterior

VARIANCE_SLACK = -1e-10


@dataclass(frozen=True)
class EvalGrid:
    """All (context, action) combinations a policy could realize."""

    contexts: np.ndarray
    actions: np.ndarray
    rows: np.ndarray

    @classmethod
    def from_parts(cls, contexts: np.ndarray, actions: np.ndarray) -> "EvalGrid":
        contexts = np.asarray(contexts, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        if contexts.ndim != 2 or actions.ndim != 2:
            raise ValueError("contexts and actions must be 2-d arrays")
        if contexts.shape[0] < 1 or actions.shape[0] < 1:
            raise ValueError("contexts and actions must be non-empty")
        rows = np.hstack(
            [
                np.repeat(contexts, actions.shape[0], axis=0),
                np.tile(actions, (contexts.shape[0], 1)),
            ]
        )
        return cls(contexts=contexts, actions=actions, rows=rows)

    @property
    def n_contexts(self) -> int:
        return int(self.contexts.shape[0])

    @property
    def n_actions(self) -> int:
        return int(self.actions.shape[0])

    @property
    def n_rows(self) -> int:
        return int(self.rows.shape[0])


@dataclass(frozen=True)
class PolicyMatrix:
    """Action probabilities per context: shape (K, T), columns sum to one."""

    matrix: np.ndarray

    @property
    def n_actions(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def n_contexts(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def flat(self) -> np.ndarray:
        """Column-major vector aligned with EvalGrid row order."""
        return self.matrix.flatten(order="F")


def policy_matrix(probs: np.ndarray, *, atol: float = 1e-6, normalize: bool = False) -> PolicyMatrix:
    """Validate (and optionally renormalize) an action-probability matrix."""
    mat = np.asarray(probs, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("policy probabilities must be a (K, T) matrix")
    if np.any(mat < -atol) or np.any(mat > 1.0 + atol):
        raise ValueError("policy probabilities must lie in [0, 1]")
    sums = mat.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > atol):
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(f"policy columns must sum to 1 (largest deviation {worst:.3e})")
    if normalize:
        mat = np.clip(mat, 0.0, None) / np.clip(mat, 0.0, None).sum(axis=0, keepdims=True)
    return PolicyMatrix(matrix=mat)


@dataclass(frozen=True)
class MetricGaussian:
    """Closed-form metric distribution for regression feedback."""

    mean: float
    variance: float

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


@dataclass(frozen=True)
class MetricSamples:
    """Empirical metric distribution for one candidate policy."""

    samples: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    @property
    def std(self) -> float:
        return float(self.samples.std())

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.samples, q))


def _check_policy(grid: EvalGrid, policy: PolicyMatrix) -> None:
    if policy.matrix.shape != (grid.n_actions, grid.n_contexts):
        raise ValueError(
            f"policy shape {policy.matrix.shape} does not match grid ({grid.n_actions}, {grid.n_contexts})"
        )


def _finalize_variance(variance: float) -> float:
    if variance < VARIANCE_SLACK:
        raise ValueError(f"metric variance came out negative ({variance:.3e})")
    return max(variance, 0.0)


def metric_gaussian(
    post: SvgpPosterior,
    grid: EvalGrid,
    policy: PolicyMatrix,
    mode: str = "fitc",
) -> MetricGaussian:
    """Mean and variance of the metric when feedback is the latent itself.

    ``exact`` projects the full posterior covariance over the grid;
    ``sparse`` assembles the same covariance from the inducing moments
    (an independent code path used for cross-checking); ``fitc`` drops
    off-diagonal projection residuals, which scales to large grids.
    """
    if post.likelihood != "gaussian":
        raise ValueError("closed-form metric requires a gaussian-feedback surrogate")
    _check_policy(grid, policy)
    p = policy.flat / grid.n_contexts
    if mode == "exact":
        mean_f, cov = post.predict_latent(grid.rows, mode="full")
        return MetricGaussian(float(p @ mean_f), _finalize_variance(float(p @ cov @ p)))
    if mode == "sparse":
        # Unwhitened assembly from q(u) moments: posterior covariance is
        # K_xx - K_xu (Kuu^-1 - Kuu^-1 S_u Kuu^-1) K_ux.
        m_u, s_u = post.inducing_moments()
        with torch.no_grad():
            x_mapped = post.feature_map.transform(grid.rows)
            z = post.mapped_inducing()
            low = post.kuu_chol()
            k_ux = kernel_tensor(post.family, post.variance(), post.lengthscales(), z, x_mapped).numpy()
            k_xx = kernel_tensor(post.family, post.variance(), post.lengthscales(), x_mapped).numpy()
            low_np = low.numpy()
        half = np.linalg.solve(low_np, k_ux)
        kuu_inv_kux = np.linalg.solve(low_np.T, half)
        mean_f = kuu_inv_kux.T @ m_u
        cov = k_xx - half.T @ half + kuu_inv_kux.T @ s_u @ kuu_inv_kux
        return MetricGaussian(float(p @ mean_f), _finalize_variance(float(p @ cov @ p)))
    if mode == "fitc":
        with torch.no_grad():
            mean_f, lv_a, lam = post.latent_factors(grid.rows)
            p_t = torch.from_numpy(p)
            mean = float(p_t @ mean_f)
            var = float((lam * p_t * p_t).sum() + ((lv_a @ p_t) ** 2).sum())
        return MetricGaussian(mean, _finalize_variance(var))
    raise ValueError(f"unknown mode {mode!r}, expected exact, sparse, or fitc")


def metric_samples_binary(
    post: SvgpPosterior,
    grid: EvalGrid,
    policies,
    *,
    n_samples: int = 1000,
    seed: int = 0,
    route: str = "fitc",
    clamp: float = 30.0,
):
    """Sampled metric distributions for binary feedback.

    Draws from the noise-free latent posterior over the whole grid,
    pushes each draw through the logistic link, and averages with the
    policy weights: uncertainty in the metric reflects uncertainty about
    the feedback function, not the coin flips of individual interactions.

    One latent sample bank is shared by all candidates (common random
    numbers), so a list input returns one :class:`MetricSamples` per
    candidate scored against identical draws. ``route='fitc'`` keeps only
    diagonal projection residuals and scales to large grids;
    ``route='full'`` factors the complete grid covariance.
    """
    if post.likelihood != "bernoulli":
        raise ValueError("sampled metric requires a bernoulli-feedback surrogate")
    single = isinstance(policies, PolicyMatrix)
    plist = [policies] if single else list(policies)
    if not plist:
        raise ValueError("at least one policy is required")
    for pol in plist:
        _check_policy(grid, pol)
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    weights = np.column_stack([pol.flat for pol in plist]) / grid.n_contexts
    rng = np.random.default_rng(derive_seed("metric-samples", seed))

    with torch.no_grad():
        if route == "fitc":
            mean_f, lv_a, lam = post.latent_factors(grid.rows)
            c = lv_a.shape[0]
            e1 = torch.from_numpy(rng.standard_normal((c, n_samples)))
            e2 = torch.from_numpy(rng.standard_normal((grid.n_rows, n_samples)))
            draws = mean_f.unsqueeze(1) + lv_a.T @ e1 + torch.sqrt(lam).unsqueeze(1) * e2
        elif route == "full":
            mean_np, cov = post.predict_latent(grid.rows, mode="full")
            low = robust_cholesky(torch.from_numpy(cov))
            e = torch.from_numpy(rng.standard_normal((grid.n_rows, n_samples)))
            draws = torch.from_numpy(mean_np).unsqueeze(1) + low @ e
        else:
            raise ValueError(f"unknown route {route!r}, expected fitc or full")
        rates = torch.sigmoid(draws.clamp(-clamp, clamp))
        values = (torch.from_numpy(weights).T @ rates).numpy()
    results = [MetricSamples(samples=values[i].copy()) for i in range(len(plist))]
    return results[0] if single else results
