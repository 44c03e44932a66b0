"""Acquisition scores for picking the next candidate to deploy.

Each candidate's metric distribution is reduced to a single score:
expected improvement over the incumbent, probability of improvement, or
an upper confidence bound. Scores come in two flavors that must agree in
the large-sample limit: closed forms from Gaussian moments, and plain
averages over metric samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

KINDS = ("ei", "pi", "ucb")


@dataclass(frozen=True)
class AcquisitionConfig:
    """Score family plus its tuning knobs.

    ``xi`` is the improvement margin added to the incumbent for ei/pi;
    ``beta`` weights the deviation term of ucb.
    """

    kind: str = "ei"
    xi: float = 0.0
    beta: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown acquisition kind {self.kind!r}, expected one of {KINDS}")
        if self.xi < 0.0:
            raise ValueError("xi must be non-negative")
        if self.beta < 0.0:
            raise ValueError("beta must be non-negative")


def score(means, stds, incumbent: float, config: AcquisitionConfig) -> np.ndarray:
    """Closed-form scores from Gaussian metric moments.

    Zero-deviation candidates get the deterministic limits: improvement
    clipped at zero, a hard 0/1 probability, and ucb equal to the mean.
    """
    mu = np.asarray(means, dtype=np.float64)
    sd = np.asarray(stds, dtype=np.float64)
    mu, sd = np.broadcast_arrays(mu, sd)
    if np.any(sd < 0.0):
        raise ValueError("stds must be non-negative")
    if config.kind == "ucb":
        return mu + config.beta * sd
    gap = mu - (incumbent + config.xi)
    out = np.empty(mu.shape, dtype=np.float64)
    exact = sd == 0.0
    z = np.divide(gap, sd, out=np.zeros_like(gap), where=~exact)
    if config.kind == "ei":
        out[~exact] = (gap * norm.cdf(z) + sd * norm.pdf(z))[~exact]
        out[exact] = np.maximum(gap[exact], 0.0)
    else:
        out[~exact] = norm.cdf(z)[~exact]
        out[exact] = (gap[exact] > 0.0).astype(np.float64)
    return out


def score_samples(samples, incumbent: float, config: AcquisitionConfig) -> np.ndarray:
    """Monte Carlo scores: one row of metric samples per candidate."""
    values = np.asarray(samples, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("samples must be (n_candidates, n_samples)")
    if config.kind == "ucb":
        return values.mean(axis=1) + config.beta * values.std(axis=1)
    gap = values - (incumbent + config.xi)
    if config.kind == "ei":
        return np.maximum(gap, 0.0).mean(axis=1)
    return (gap > 0.0).mean(axis=1)


def select_next(scores, deployed) -> int:
    """Index of the best not-yet-deployed candidate, lowest index on ties."""
    values = np.asarray(scores, dtype=np.float64).ravel()
    masked = values.copy()
    deployed_idx = np.asarray(list(deployed), dtype=np.int64) if len(deployed) else np.empty(0, dtype=np.int64)
    if deployed_idx.size:
        if deployed_idx.min() < 0 or deployed_idx.max() >= values.size:
            raise ValueError("deployed indices out of range")
        masked[deployed_idx] = -np.inf
    if np.all(np.isneginf(masked)):
        raise ValueError("every candidate has already been deployed")
    if np.any(np.isnan(masked)):
        raise ValueError("scores contain NaN")
    return int(np.argmax(masked))
