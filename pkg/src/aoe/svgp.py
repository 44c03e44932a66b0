"""Sparse variational Gaussian processes for large interaction logs.

The model keeps a variational posterior over function values at a small
set of inducing inputs chosen from the training rows, so conditioning on
hundreds of thousands of logged interactions stays tractable. Training
maximizes the stochastic evidence lower bound with Adam over minibatches;
the bound never exceeds the exact log marginal likelihood, and matches it
when the inducing set equals the training set under a Gaussian likelihood.

Binary feedback uses a Bernoulli likelihood with a logistic link, with
expected log-likelihoods computed by Gauss-Hermite quadrature.

The variational distribution is whitened: with ``L`` the Cholesky factor
of the inducing covariance, ``u = L v`` and ``q(v) = N(m_v, L_v L_v')``,
which keeps the parameterization well conditioned as hyperparameters
move. ``L_v`` stores unconstrained entries with a softplus diagonal.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.cluster import kmeans_plusplus

from .kernels import (
    DTYPE,
    KERNEL_FAMILIES,
    FeatureMap,
    KernelParams,
    decode_array,
    encode_array,
    kernel_tensor,
    robust_cholesky,
)
from .seeding import derive_seed

LOG_TWO_PI = math.log(2.0 * math.pi)
LIKELIHOODS = ("gaussian", "bernoulli")

_SOFTPLUS_INV_ONE = math.log(math.e - 1.0)

_GH_CACHE: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}


def _gauss_hermite(order: int) -> tuple[torch.Tensor, torch.Tensor]:
    if order not in _GH_CACHE:
        nodes, weights = np.polynomial.hermite.hermgauss(order)
        _GH_CACHE[order] = (
            torch.from_numpy(nodes.astype(np.float64)),
            torch.from_numpy(weights.astype(np.float64)),
        )
    return _GH_CACHE[order]


def bernoulli_expected_loglik(mu: torch.Tensor, var: torch.Tensor, y: torch.Tensor, order: int = 20) -> torch.Tensor:
    """E[log p(y|f)] under f ~ N(mu, var), logistic link, by quadrature."""
    nodes, weights = _gauss_hermite(order)
    f = mu.unsqueeze(1) + torch.sqrt(2.0 * var.clamp_min(0.0)).unsqueeze(1) * nodes.unsqueeze(0)
    sign = 2.0 * y - 1.0
    logp = F.logsigmoid(sign.unsqueeze(1) * f)
    return (logp * weights.unsqueeze(0)).sum(dim=1) / math.sqrt(math.pi)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for the stochastic bound."""

    epochs: int = 200
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0
    quad_order: int = 20
    optimize_hyperparams: bool = True
    optimize_inducing: bool = False

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.quad_order < 1:
            raise ValueError("quad_order must be at least 1")


class SvgpPosterior:
    """Variational posterior plus trainable kernel and representation.

    Inducing inputs are stored as raw design-matrix rows and re-mapped
    through the feature map whenever covariances are evaluated, so they
    track embedding updates during training.
    """

    def __init__(
        self,
        feature_map: FeatureMap,
        family: str,
        z_raw: np.ndarray,
        *,
        likelihood: str = "gaussian",
        variance: float = 1.0,
        lengthscales=None,
        noise_variance: float = 0.1,
        jitter_scale: float = 1e-6,
    ):
        if family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {family!r}")
        if likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {likelihood!r}, expected one of {LIKELIHOODS}")
        z_raw = np.asarray(z_raw, dtype=np.float64)
        if z_raw.ndim != 2 or z_raw.shape[0] < 1 or z_raw.shape[1] != feature_map.raw_dim:
            raise ValueError(f"z_raw must have shape (C, {feature_map.raw_dim})")
        self.feature_map = feature_map
        self.family = family
        self.likelihood = likelihood
        self.z_raw = z_raw
        self.jitter_scale = float(jitter_scale)

        dim = feature_map.feature_dim
        if lengthscales is None:
            ls0 = np.ones(dim)
        else:
            ls0 = np.broadcast_to(np.asarray(lengthscales, dtype=np.float64), (dim,)).copy()
        if not variance > 0 or not np.all(ls0 > 0) or not noise_variance > 0:
            raise ValueError("variance, lengthscales, and noise must be positive")
        self.raw_log_variance = torch.tensor(math.log(variance), dtype=DTYPE, requires_grad=True)
        self.raw_log_lengthscales = torch.tensor(np.log(ls0), dtype=DTYPE, requires_grad=True)
        self.raw_log_noise = torch.tensor(math.log(noise_variance), dtype=DTYPE, requires_grad=True)

        c = z_raw.shape[0]
        self.m_v = torch.zeros(c, dtype=DTYPE, requires_grad=True)
        raw_l0 = np.diag(np.full(c, _SOFTPLUS_INV_ONE))
        self.raw_l = torch.tensor(raw_l0, dtype=DTYPE, requires_grad=True)
        # Free-floating inducing inputs in mapped space; created on demand
        # when a training config asks for them.
        self.z_free: torch.Tensor | None = None

    @property
    def n_inducing(self) -> int:
        return int(self.z_raw.shape[0])

    def variance(self) -> torch.Tensor:
        return torch.exp(self.raw_log_variance)

    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.raw_log_lengthscales)

    def noise_variance(self) -> torch.Tensor:
        return torch.exp(self.raw_log_noise)

    def kernel_params(self) -> KernelParams:
        """Float snapshot of the current kernel hyperparameters."""
        with torch.no_grad():
            return KernelParams(
                self.family,
                float(self.variance()),
                tuple(float(v) for v in self.lengthscales()),
            )

    def scale_tril(self) -> torch.Tensor:
        low = torch.tril(self.raw_l, diagonal=-1)
        return low + torch.diag(F.softplus(torch.diagonal(self.raw_l)))

    def mapped_inducing(self) -> torch.Tensor:
        if self.z_free is not None:
            return self.z_free
        return self.feature_map.transform(self.z_raw)

    def kuu_chol(self) -> torch.Tensor:
        z = self.mapped_inducing()
        kuu = kernel_tensor(self.family, self.variance(), self.lengthscales(), z)
        jitter = self.jitter_scale * float(self.variance().detach())
        return robust_cholesky(kuu, initial_jitter=jitter)

    def projection(self, x_mapped: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Whitened cross-covariance ``a`` and prior diagonal at new rows."""
        low = self.kuu_chol()
        z = self.mapped_inducing()
        k_ux = kernel_tensor(self.family, self.variance(), self.lengthscales(), z, x_mapped)
        a = torch.linalg.solve_triangular(low, k_ux, upper=False)
        k_diag = self.variance() * torch.ones(x_mapped.shape[0], dtype=DTYPE)
        return a, k_diag

    def latent_factors(self, x_raw: np.ndarray) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(mean, lv_a, lam): the posterior over f at the given rows is
        N(mean, lv_a' lv_a + diag(residual)) where lam clamps the residual
        at zero. Differentiable; used by both prediction and sampling."""
        x_mapped = self.feature_map.transform(np.asarray(x_raw, dtype=np.float64))
        a, k_diag = self.projection(x_mapped)
        mean = a.T @ self.m_v
        lv_a = self.scale_tril().T @ a
        lam = (k_diag - (a * a).sum(dim=0)).clamp_min(0.0)
        return mean, lv_a, lam

    def predict_latent(self, x_raw: np.ndarray, mode: str = "diag"):
        """Posterior over the latent function at raw rows.

        ``diag`` and ``full`` are exact under the variational posterior;
        ``fitc_diag`` clamps the prior-minus-projection residual at zero
        before adding the variational part, matching what the sampler
        uses for large evaluation sets.
        """
        with torch.no_grad():
            x_mapped = self.feature_map.transform(np.asarray(x_raw, dtype=np.float64))
            a, k_diag = self.projection(x_mapped)
            mean = (a.T @ self.m_v).numpy()
            lv_a = self.scale_tril().T @ a
            if mode == "full":
                k_xx = kernel_tensor(self.family, self.variance(), self.lengthscales(), x_mapped)
                cov = k_xx - a.T @ a + lv_a.T @ lv_a
                cov = 0.5 * (cov + cov.T)
                return mean, cov.numpy()
            resid = k_diag - (a * a).sum(dim=0)
            if mode == "diag":
                var = (resid + (lv_a * lv_a).sum(dim=0)).clamp_min(0.0)
            elif mode == "fitc_diag":
                var = resid.clamp_min(0.0) + (lv_a * lv_a).sum(dim=0)
            else:
                raise ValueError(f"unknown mode {mode!r}, expected diag, full, or fitc_diag")
            return mean, var.numpy()

    def inducing_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Unwhitened variational moments (mean and covariance of u)."""
        with torch.no_grad():
            low = self.kuu_chol()
            m_u = low @ self.m_v
            half = low @ self.scale_tril()
            s_u = half @ half.T
        return m_u.numpy(), s_u.numpy()

    def set_variational_from_moments(self, m_u: np.ndarray, s_u: np.ndarray) -> None:
        """Install q(u) = N(m_u, s_u); s_u must be positive definite."""
        m_u = np.asarray(m_u, dtype=np.float64).ravel()
        s_u = np.asarray(s_u, dtype=np.float64)
        c = self.n_inducing
        if m_u.shape != (c,) or s_u.shape != (c, c):
            raise ValueError(f"moments must have shapes ({c},) and ({c}, {c})")
        with torch.no_grad():
            low = self.kuu_chol()
            m_v = torch.linalg.solve_triangular(low, torch.from_numpy(m_u).reshape(-1, 1), upper=False).reshape(-1)
            s_chol = torch.linalg.cholesky(torch.from_numpy(0.5 * (s_u + s_u.T)))
            l_v = torch.linalg.solve_triangular(low, s_chol, upper=False)
            diag = torch.diagonal(l_v)
            raw = torch.tril(l_v, diagonal=-1) + torch.diag(torch.log(torch.expm1(diag)))
            self.m_v.copy_(m_v)
            self.raw_l.copy_(raw)

    def trainable_parameters(self, config: TrainConfig) -> list[torch.Tensor]:
        params = [self.m_v, self.raw_l]
        if config.optimize_hyperparams:
            params += [self.raw_log_variance, self.raw_log_lengthscales]
            if self.likelihood == "gaussian":
                params.append(self.raw_log_noise)
            params += self.feature_map.parameters()
        if config.optimize_inducing:
            if self.z_free is None:
                with torch.no_grad():
                    mapped = self.feature_map.transform(self.z_raw).clone()
                self.z_free = mapped.requires_grad_(True)
            params.append(self.z_free)
        return params

    def to_json(self) -> str:
        payload = {
            "version": 1,
            "family": self.family,
            "likelihood": self.likelihood,
            "jitter_scale": self.jitter_scale,
            "raw_log_variance": float(self.raw_log_variance.detach()),
            "raw_log_lengthscales": encode_array(self.raw_log_lengthscales.detach().numpy()),
            "raw_log_noise": float(self.raw_log_noise.detach()),
            "z_raw": encode_array(self.z_raw),
            "m_v": encode_array(self.m_v.detach().numpy()),
            "raw_l": encode_array(self.raw_l.detach().numpy()),
            "z_free": None if self.z_free is None else encode_array(self.z_free.detach().numpy()),
            "feature_map": self.feature_map.to_payload(),
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "SvgpPosterior":
        payload = json.loads(text)
        version = payload.get("version")
        if version != 1:
            raise ValueError(f"unsupported posterior payload version {version!r}")
        fmap = FeatureMap.from_payload(payload["feature_map"])
        post = cls(
            fmap,
            payload["family"],
            decode_array(payload["z_raw"]),
            likelihood=payload["likelihood"],
            jitter_scale=payload["jitter_scale"],
        )
        with torch.no_grad():
            post.raw_log_variance.fill_(payload["raw_log_variance"])
            post.raw_log_lengthscales.copy_(torch.from_numpy(decode_array(payload["raw_log_lengthscales"])))
            post.raw_log_noise.fill_(payload["raw_log_noise"])
            post.m_v.copy_(torch.from_numpy(decode_array(payload["m_v"])))
            post.raw_l.copy_(torch.from_numpy(decode_array(payload["raw_l"])))
        if payload["z_free"] is not None:
            post.z_free = torch.from_numpy(decode_array(payload["z_free"])).requires_grad_(True)
        return post


def init_svgp(
    feature_map: FeatureMap,
    family: str,
    x_raw: np.ndarray,
    *,
    n_inducing: int,
    likelihood: str = "gaussian",
    seed: int = 0,
    variance: float = 1.0,
    lengthscales=None,
    noise_variance: float = 0.1,
) -> SvgpPosterior:
    """Fresh posterior with inducing inputs picked from the training rows.

    Selection runs k-means++ seeding over the mapped, deduplicated rows
    and keeps the chosen original rows, so inducing inputs are always
    actual observed configurations. Asking for more inducing points than
    there are distinct rows silently uses all of them.
    """
    x_arr = np.asarray(x_raw, dtype=np.float64)
    if x_arr.ndim != 2 or x_arr.shape[1] != feature_map.raw_dim:
        raise ValueError(f"x_raw must have shape (n, {feature_map.raw_dim})")
    if n_inducing < 1:
        raise ValueError("n_inducing must be at least 1")
    with torch.no_grad():
        mapped = feature_map.transform(x_arr).numpy()
    if lengthscales is None:
        # Start at the per-dimension data scale so the kernel is neither
        # flat nor diagonal regardless of the raw feature units.
        spread = mapped.std(axis=0)
        lengthscales = np.where(spread > 1e-6, spread, 1.0)
    unique_rows, first_index = np.unique(mapped, axis=0, return_index=True)
    c_eff = min(int(n_inducing), unique_rows.shape[0])
    if c_eff == unique_rows.shape[0]:
        chosen = first_index
    else:
        _, rel = kmeans_plusplus(
            unique_rows,
            n_clusters=c_eff,
            random_state=int(derive_seed("inducing", seed) % (2**32)),
        )
        chosen = first_index[rel]
    z_raw = x_arr[np.sort(chosen)]
    return SvgpPosterior(
        feature_map,
        family,
        z_raw,
        likelihood=likelihood,
        variance=variance,
        lengthscales=lengthscales,
        noise_variance=noise_variance,
    )


def _kl_whitened(post: SvgpPosterior) -> torch.Tensor:
    lv = post.scale_tril()
    quad = (post.m_v * post.m_v).sum() + (lv * lv).sum()
    return 0.5 * (quad - post.n_inducing) - torch.log(torch.diagonal(lv)).sum()


def elbo(
    post: SvgpPosterior,
    x_raw: np.ndarray,
    y: np.ndarray,
    *,
    batch_indices=None,
    total_n: int | None = None,
    quad_order: int = 20,
) -> torch.Tensor:
    """Evidence lower bound, differentiable in all model parameters.

    With ``batch_indices`` the data term is an unbiased minibatch
    estimate scaled by ``total_n / batch size``; otherwise the full data
    term is used.
    """
    x_arr = np.asarray(x_raw, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64).ravel()
    if x_arr.shape[0] != y_arr.shape[0]:
        raise ValueError("x and y must have matching first dimensions")
    n_total = int(total_n) if total_n is not None else y_arr.shape[0]
    if batch_indices is None:
        xb, yb = x_arr, y_arr
    else:
        idx = np.asarray(batch_indices, dtype=np.int64)
        xb, yb = x_arr[idx], y_arr[idx]
    if post.likelihood == "bernoulli" and not np.all((yb == 0.0) | (yb == 1.0)):
        raise ValueError("bernoulli feedback must be 0/1")
    weight = n_total / xb.shape[0]

    x_mapped = post.feature_map.transform(xb)
    a, k_diag = post.projection(x_mapped)
    mu = a.T @ post.m_v
    lv_a = post.scale_tril().T @ a
    s = (k_diag - (a * a).sum(dim=0) + (lv_a * lv_a).sum(dim=0)).clamp_min(1e-12)
    y_t = torch.from_numpy(np.ascontiguousarray(yb))
    if post.likelihood == "gaussian":
        noise = post.noise_variance()
        point = -0.5 * (LOG_TWO_PI + torch.log(noise)) - ((y_t - mu) ** 2 + s) / (2.0 * noise)
    else:
        point = bernoulli_expected_loglik(mu, s, y_t, order=quad_order)
    return weight * point.sum() - _kl_whitened(post)


def _epoch_batches(y: np.ndarray, batch_size: int, rng: np.random.Generator, stratify: bool) -> list[np.ndarray]:
    """Shuffled minibatch index sets for one epoch.

    Stratified mode keeps every batch's positive/negative feedback split
    within one sample of the global ratio.
    """
    n = y.shape[0]
    if not stratify or batch_size >= n:
        perm = rng.permutation(n)
        return [perm[start : start + batch_size] for start in range(0, n, batch_size)]
    positives = rng.permutation(np.flatnonzero(y > 0.5))
    negatives = rng.permutation(np.flatnonzero(y <= 0.5))
    n_batches = -(-n // batch_size)
    pos_edges = np.round(np.linspace(0.0, positives.size, n_batches + 1)).astype(np.int64)
    neg_edges = np.round(np.linspace(0.0, negatives.size, n_batches + 1)).astype(np.int64)
    batches = []
    for b in range(n_batches):
        chunk = np.concatenate(
            [positives[pos_edges[b] : pos_edges[b + 1]], negatives[neg_edges[b] : neg_edges[b + 1]]]
        )
        batches.append(rng.permutation(chunk))
    return batches


def train_svgp(post: SvgpPosterior, x_raw: np.ndarray, y: np.ndarray, config: TrainConfig) -> list[float]:
    """Optimize the bound with Adam over shuffled minibatches.

    Binary feedback uses stratified minibatches; Gaussian uses plain
    shuffling. Returns one bound estimate per epoch (batch estimates
    averaged with batch-size weights). Everything is deterministic given
    the config seed and the initial state; ``epochs=0`` leaves the model
    untouched.
    """
    x_arr = np.asarray(x_raw, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64).ravel()
    n = y_arr.shape[0]
    if n == 0:
        raise ValueError("training needs at least one observation")
    params = post.trainable_parameters(config)
    optimizer = torch.optim.Adam(params, lr=config.lr)
    rng = np.random.default_rng(derive_seed("svgp-train", config.seed))
    stratify = post.likelihood == "bernoulli"
    history: list[float] = []
    for epoch in range(config.epochs):
        epoch_value = 0.0
        for idx in _epoch_batches(y_arr, config.batch_size, rng, stratify):
            optimizer.zero_grad()
            value = elbo(post, x_arr, y_arr, batch_indices=idx, total_n=n, quad_order=config.quad_order)
            if not torch.isfinite(value):
                raise FloatingPointError(
                    f"bound became non-finite at epoch {epoch}; lower the learning rate or check the inputs"
                )
            loss = -value / n
            loss.backward()
            optimizer.step()
            epoch_value += float(value.detach()) * (len(idx) / n)
        history.append(epoch_value)
    return history
