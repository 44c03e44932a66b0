"""Dataset loading and synthetic stand-ins.

Two external formats are supported: the letter-recognition CSV (one
capital letter label followed by 16 integer features per row) and the
tab-separated ratings log ``user  item  rating  timestamp``. The
synthetic generators produce data with the same shapes and value ranges
so every benchmark runs without any download: quantized Gaussian class
clusters for classification, and a low-rank ratings matrix with a
popularity-skewed observation pattern for recommendation.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .seeding import derive_seed

N_LETTER_FEATURES = 16
N_LETTER_CLASSES = 26


def load_letter_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read the letter dataset: returns (features (n, 16), labels (n,) in 0..25)."""
    features: list[list[float]] = []
    labels: list[int] = []
    with open(path, newline="") as handle:
        for lineno, row in enumerate(csv.reader(handle), start=1):
            if not row:
                continue
            if len(row) != 1 + N_LETTER_FEATURES:
                raise ValueError(f"{path}:{lineno}: expected letter plus {N_LETTER_FEATURES} features, got {len(row)} fields")
            letter = row[0].strip().upper()
            if len(letter) != 1 or not "A" <= letter <= "Z":
                raise ValueError(f"{path}:{lineno}: bad label {row[0]!r}")
            labels.append(ord(letter) - ord("A"))
            features.append([float(v) for v in row[1:]])
    if not labels:
        raise ValueError(f"{path}: no rows")
    return np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def load_ratings_table(path, *, n_users: int | None = None, n_items: int | None = None) -> np.ndarray:
    """Read a ``user item rating timestamp`` log into a dense matrix.

    Ids are 1-based in the file and become 0-based rows/columns; missing
    pairs hold 0. With ``n_users``/``n_items`` the busiest users and items
    are kept and the matrix is restricted to them.
    """
    users: list[int] = []
    items: list[int] = []
    ratings: list[float] = []
    with open(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected at least user, item, rating")
            users.append(int(parts[0]) - 1)
            items.append(int(parts[1]) - 1)
            ratings.append(float(parts[2]))
    if not users:
        raise ValueError(f"{path}: no rows")
    u = np.asarray(users)
    i = np.asarray(items)
    r = np.asarray(ratings)
    if u.min() < 0 or i.min() < 0:
        raise ValueError(f"{path}: ids must be positive")
    matrix = np.zeros((u.max() + 1, i.max() + 1))
    matrix[u, i] = r
    if n_users is not None:
        keep = np.argsort(-(matrix > 0).sum(axis=1), kind="stable")[:n_users]
        matrix = matrix[np.sort(keep)]
    if n_items is not None:
        keep = np.argsort(-(matrix > 0).sum(axis=0), kind="stable")[:n_items]
        matrix = matrix[:, np.sort(keep)]
    return matrix


def make_synthetic_letter_data(
    n: int,
    *,
    seed: int = 0,
    n_classes: int = N_LETTER_CLASSES,
    center_spread: float = 2.6,
    within_noise: float = 1.1,
    modes_per_class: int = 3,
    informative_dims: int = N_LETTER_FEATURES,
) -> tuple[np.ndarray, np.ndarray]:
    """Quantized cluster mixtures shaped like the letter dataset.

    Each class is a mixture of ``modes_per_class`` Gaussian clusters in
    16-d; points are noisy cluster draws clipped and rounded to the
    integer range 0..15. When a class has at least two modes, its second
    mode mirrors the first through the middle of the feature range, so
    no linear rule can claim both halves of the class; kernel methods
    handle the pairs locally and beat linear classifiers by a wide
    margin, matching the character-recognition benchmark this imitates.
    With ``informative_dims`` below 16 the class structure lives in the
    leading dimensions only and the rest carry pure noise, the way real
    feature sets mix useful and useless measurements.
    """
    if modes_per_class < 1:
        raise ValueError("modes_per_class must be positive")
    if not 1 <= informative_dims <= N_LETTER_FEATURES:
        raise ValueError(f"informative_dims must be in [1, {N_LETTER_FEATURES}]")
    rng = np.random.default_rng(derive_seed("letters", seed))
    centers = 7.5 + center_spread * rng.normal(size=(n_classes, modes_per_class, N_LETTER_FEATURES))
    if modes_per_class > 1:
        centers[:, 1] = 15.0 - centers[:, 0]
    centers[:, :, informative_dims:] = 7.5
    labels = rng.integers(0, n_classes, size=n)
    modes = rng.integers(0, modes_per_class, size=n)
    points = centers[labels, modes] + within_noise * rng.normal(size=(n, N_LETTER_FEATURES))
    features = np.clip(np.rint(points), 0, 15).astype(np.float64)
    return features, labels.astype(np.int64)


def make_synthetic_ratings(
    n_users: int = 100,
    n_items: int = 100,
    *,
    seed: int = 0,
    rank: int = 4,
    density: float = 0.12,
) -> np.ndarray:
    """Low-rank 1..5 ratings with popularity-skewed observations.

    Unobserved entries hold 0. Scores come from a rank-``rank`` latent
    model plus user/item biases; observation probability is proportional
    to item popularity, giving the long-tailed pattern real logs have.
    """
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(derive_seed("ratings", seed))
    u = rng.normal(size=(n_users, rank))
    v = rng.normal(size=(n_items, rank))
    scores = u @ v.T / np.sqrt(rank)
    scores += 0.5 * rng.normal(size=(n_users, 1)) + 0.7 * rng.normal(size=(1, n_items))
    # Rank-transform scores to flat 1..5 ratings.
    order = scores.ravel().argsort().argsort()
    ratings = 1.0 + np.floor(5.0 * order / order.size)
    ratings = ratings.reshape(scores.shape).clip(1, 5)
    popularity = rng.lognormal(mean=0.0, sigma=0.8, size=n_items)
    p_obs = density * popularity / popularity.mean()
    observed = rng.uniform(size=(n_users, n_items)) < np.clip(p_obs, 0.0, 1.0)
    return np.where(observed, ratings, 0.0)


def train_eval_split(n: int, train_frac: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint shuffled index sets covering range(n)."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    rng = np.random.default_rng(derive_seed("split", seed))
    perm = rng.permutation(n)
    cut = int(round(train_frac * n))
    if cut == 0 or cut == n:
        raise ValueError("split leaves one side empty")
    return np.sort(perm[:cut]), np.sort(perm[cut:])
