"""Exact Gaussian process regression with closed-form posteriors.

This is the small-data path: every covariance row fits in memory and the
posterior comes from one Cholesky solve. The marginal likelihood is
available both as a number on a fitted model and as a differentiable
tensor, so hyperparameters can be tuned by gradient ascent with random
restarts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.linalg import solve_triangular

from .kernels import KernelParams, kernel_matrix, kernel_tensor, robust_cholesky
from .seeding import derive_seed

LOG_TWO_PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class ExactGp:
    """Fitted regression model: kernel, noise, and solved training state.

    ``chol`` is the lower Cholesky factor of ``K(x,x) + noise * I`` and
    ``alpha`` solves that system against the targets, so predictions are
    matrix products against stored quantities.
    """

    params: KernelParams
    noise_variance: float
    x_train: np.ndarray
    y_train: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    lml: float

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    def predict(self, x_new: np.ndarray, full_cov: bool = False):
        """Posterior mean and variance (or full covariance) of f at new rows."""
        k_star = kernel_matrix(self.params, self.x_train, x_new)
        mean = k_star.T @ self.alpha
        v = solve_triangular(self.chol, k_star, lower=True)
        if full_cov:
            cov = kernel_matrix(self.params, np.asarray(x_new, dtype=np.float64)) - v.T @ v
            cov = 0.5 * (cov + cov.T)
            return mean, cov
        var = self.params.variance - np.einsum("ij,ij->j", v, v)
        return mean, np.maximum(var, 0.0)


def fit_exact(params: KernelParams, noise_variance: float, x: np.ndarray, y: np.ndarray) -> ExactGp:
    """Condition a zero-mean model with the given kernel on (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim != 2:
        raise ValueError("x must be 2-d (rows are points)")
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"got {x.shape[0]} inputs but {y.shape[0]} targets")
    if noise_variance < 0.0:
        raise ValueError("noise variance must be non-negative")
    n = x.shape[0]
    gram = kernel_matrix(params, x) + noise_variance * np.eye(n)
    low = robust_cholesky(torch.from_numpy(gram)).numpy()
    alpha = solve_triangular(low, y, lower=True)
    alpha = solve_triangular(low.T, alpha, lower=False)
    lml = float(
        -0.5 * y @ alpha - np.log(np.diag(low)).sum() - 0.5 * n * LOG_TWO_PI
    )
    return ExactGp(
        params=params,
        noise_variance=float(noise_variance),
        x_train=x,
        y_train=y,
        chol=low,
        alpha=alpha,
        lml=lml,
    )


def lml_tensor(
    family: str,
    variance: torch.Tensor,
    lengthscales: torch.Tensor,
    noise_variance: torch.Tensor,
    x: torch.Tensor,
    y: torch.Tensor,
) -> torch.Tensor:
    """Log marginal likelihood as a scalar tensor, differentiable in the
    variance, lengthscales, and noise arguments."""
    n = x.shape[0]
    gram = kernel_tensor(family, variance, lengthscales, x)
    gram = gram + noise_variance * torch.eye(n, dtype=x.dtype)
    low = robust_cholesky(gram)
    alpha = torch.cholesky_solve(y.reshape(-1, 1), low).reshape(-1)
    return -0.5 * (y @ alpha) - torch.log(torch.diagonal(low)).sum() - 0.5 * n * LOG_TWO_PI


def fit_hyperparameters(
    family: str,
    x: np.ndarray,
    y: np.ndarray,
    *,
    restarts: int = 4,
    steps: int = 150,
    lr: float = 0.08,
    noise_floor: float = 1e-6,
    seed: int = 0,
) -> tuple[KernelParams, float]:
    """Maximize the marginal likelihood over kernel and noise parameters.

    Runs Adam from several initializations (the first at data-driven
    defaults, the rest perturbed) and keeps the best final likelihood.
    Returns the winning kernel plus its noise variance.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError("x must be (n, d) with one target per row")
    x_t = torch.from_numpy(np.ascontiguousarray(x))
    y_t = torch.from_numpy(np.ascontiguousarray(y))
    n, dim = x.shape
    y_var = max(float(np.var(y)), 1e-8)
    col_scale = x.std(axis=0)
    col_scale = np.where(col_scale > 1e-6, col_scale, 1.0)

    best: tuple[float, KernelParams, float] | None = None
    for restart in range(max(1, restarts)):
        rng = np.random.default_rng(derive_seed("gp-hyper", seed, restart))
        if restart == 0:
            ls0 = col_scale.copy()
            var0, noise0 = y_var, 0.1 * y_var
        else:
            ls0 = col_scale * np.exp(rng.uniform(np.log(0.3), np.log(3.0), size=dim))
            var0 = y_var * rng.uniform(0.5, 2.0)
            noise0 = 0.1 * y_var * rng.uniform(0.5, 2.0)
        raw_var = torch.tensor(np.log(var0), dtype=torch.float64, requires_grad=True)
        raw_ls = torch.tensor(np.log(ls0), dtype=torch.float64, requires_grad=True)
        raw_noise = torch.tensor(np.log(noise0), dtype=torch.float64, requires_grad=True)
        opt = torch.optim.Adam([raw_var, raw_ls, raw_noise], lr=lr)

        def objective() -> torch.Tensor:
            return -lml_tensor(
                family,
                torch.exp(raw_var),
                torch.exp(raw_ls),
                noise_floor + torch.exp(raw_noise),
                x_t,
                y_t,
            ) / n

        failed = False
        for _ in range(steps):
            opt.zero_grad()
            try:
                loss = objective()
            except np.linalg.LinAlgError:
                failed = True
                break
            loss.backward()
            opt.step()
        if failed:
            continue
        with torch.no_grad():
            try:
                final = float(-objective()) * n
            except np.linalg.LinAlgError:
                continue
            params = KernelParams(
                family,
                float(torch.exp(raw_var)),
                tuple(float(v) for v in torch.exp(raw_ls)),
            )
            noise = noise_floor + float(torch.exp(raw_noise))
        if best is None or final > best[0]:
            best = (final, params, noise)
    if best is None:
        raise np.linalg.LinAlgError("every hyperparameter restart failed to factorize")
    return best[1], best[2]
