"""Stationary covariances over learned input representations.

Model inputs mix real-valued columns with id columns (classes, users,
items).  :class:`FeatureMap` turns a raw design matrix into covariance
inputs by passing numeric columns through and replacing each id column
with trainable coordinates from an :class:`EmbeddingTable`.  The kernel,
described by :class:`KernelParams`, is then an RBF or Matern covariance
with per-dimension lengthscales evaluated on the mapped rows.

The differentiable core (:func:`kernel_tensor`) works on ``torch``
float64 tensors so the same code serves closed-form regression and
gradient-based training; :func:`kernel_matrix` is the numpy-facing
wrapper.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64

KERNEL_FAMILIES = ("rbf", "matern32", "matern52")

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)


@dataclass(frozen=True)
class KernelParams:
    """Kernel family plus positive variance and ARD lengthscales.

    ``lengthscales`` has one entry per input dimension; its length fixes
    the dimensionality the kernel accepts.
    """

    family: str
    variance: float
    lengthscales: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}, expected one of {KERNEL_FAMILIES}")
        object.__setattr__(self, "variance", float(self.variance))
        if not self.variance > 0.0:
            raise ValueError("kernel variance must be positive")
        ls = tuple(float(l) for l in self.lengthscales)
        if not ls:
            raise ValueError("at least one lengthscale is required")
        if any(not l > 0.0 for l in ls):
            raise ValueError("lengthscales must be positive")
        object.__setattr__(self, "lengthscales", ls)

    @classmethod
    def isotropic(cls, family: str, variance: float, lengthscale: float, input_dim: int) -> "KernelParams":
        """One shared lengthscale repeated across ``input_dim`` dimensions."""
        return cls(family, variance, (float(lengthscale),) * int(input_dim))

    @property
    def input_dim(self) -> int:
        return len(self.lengthscales)


def _sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # Centering both row sets before the matmul expansion keeps the result
    # accurate for inputs far from the origin (translation invariance).
    center = 0.5 * (a.mean(dim=0) + b.mean(dim=0))
    a = a - center
    b = b - center
    sq = (a * a).sum(dim=1).unsqueeze(1) + (b * b).sum(dim=1).unsqueeze(0) - 2.0 * (a @ b.T)
    return sq.clamp_min(0.0)


def kernel_tensor(
    family: str,
    variance,
    lengthscales,
    x1: torch.Tensor,
    x2: torch.Tensor | None = None,
) -> torch.Tensor:
    """Covariance matrix between two row sets as a differentiable tensor.

    ``variance`` and ``lengthscales`` may be tensors, in which case
    gradients flow through them. With ``x2=None`` the result is the
    symmetrized self-covariance of ``x1``.
    """
    if not torch.is_tensor(variance):
        variance = torch.as_tensor(variance, dtype=x1.dtype)
    if not torch.is_tensor(lengthscales):
        lengthscales = torch.as_tensor(lengthscales, dtype=x1.dtype)
    a = x1 / lengthscales
    b = a if x2 is None else x2 / lengthscales
    sq = _sqdist(a, b)
    if family == "rbf":
        k = variance * torch.exp(-0.5 * sq)
    elif family == "matern32":
        # sqrt has an unbounded derivative at zero; the floor keeps autograd
        # finite and contributes exactly zero gradient for coincident rows.
        r = torch.sqrt(sq.clamp_min(1e-36))
        k = variance * (1.0 + _SQRT3 * r) * torch.exp(-_SQRT3 * r)
    elif family == "matern52":
        r = torch.sqrt(sq.clamp_min(1e-36))
        k = variance * (1.0 + _SQRT5 * r + (5.0 / 3.0) * sq) * torch.exp(-_SQRT5 * r)
    else:
        raise ValueError(f"unknown kernel family {family!r}, expected one of {KERNEL_FAMILIES}")
    if x2 is None:
        k = 0.5 * (k + k.T)
    return k


def kernel_matrix(params: KernelParams, x1: np.ndarray, x2: np.ndarray | None = None) -> np.ndarray:
    """Covariance matrix ``K(x1, x2)`` for numpy inputs.

    Rows are points, columns are dimensions; both inputs must have
    ``params.input_dim`` columns. ``x2=None`` returns the symmetric
    self-covariance of ``x1``.
    """
    t1 = _as_input_tensor(params, x1, "x1")
    t2 = None if x2 is None else _as_input_tensor(params, x2, "x2")
    with torch.no_grad():
        k = kernel_tensor(params.family, params.variance, params.lengthscales, t1, t2)
    return k.numpy()


def _as_input_tensor(params: KernelParams, x: np.ndarray, label: str) -> torch.Tensor:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{label} must be 2-d (rows are points), got shape {arr.shape}")
    if arr.shape[1] != params.input_dim:
        raise ValueError(f"{label} has {arr.shape[1]} columns but the kernel expects {params.input_dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{label} contains non-finite values")
    return torch.from_numpy(np.ascontiguousarray(arr))


def robust_cholesky(mat: torch.Tensor, initial_jitter: float = 0.0, tries: int = 4) -> torch.Tensor:
    """Lower Cholesky factor, escalating diagonal jitter only when needed.

    With ``initial_jitter=0`` the first attempt factors ``mat`` exactly as
    given; subsequent attempts add a jitter proportional to the mean
    diagonal, growing tenfold each retry.
    """
    n = mat.shape[-1]
    eye = torch.eye(n, dtype=mat.dtype)
    if initial_jitter > 0.0:
        jitters = [initial_jitter * 10.0**k for k in range(tries)]
    else:
        base = 1e-6 * max(float(mat.diagonal().mean().detach()), 1e-300)
        jitters = [0.0] + [base * 10.0**k for k in range(tries - 1)]
    last_error: Exception | None = None
    for jitter in jitters:
        shifted = mat + jitter * eye if jitter > 0.0 else mat
        try:
            return torch.linalg.cholesky(shifted)
        except RuntimeError as err:  # not positive definite at this jitter
            last_error = err
    raise np.linalg.LinAlgError(f"matrix is not positive definite even with jitter {jitters[-1]:.3e}") from last_error


def encode_array(arr: np.ndarray) -> dict:
    """JSON-safe payload for a float64 array (shape + base64 bytes)."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(payload: dict) -> np.ndarray:
    data = base64.b64decode(payload["data"])
    return np.frombuffer(data, dtype=np.float64).reshape(payload["shape"]).copy()


class EmbeddingTable:
    """Trainable real coordinates for the members of one id vocabulary.

    Ids are arbitrary integers; lookups go through a sorted copy of the
    vocabulary, so membership is exact and unknown ids raise ``KeyError``.
    Weights start standard normal and are learned alongside the other
    model parameters.
    """

    def __init__(self, name: str, ids, dim: int, seed: int = 0, weights=None):
        id_arr = np.asarray(ids, dtype=np.int64)
        if id_arr.ndim != 1 or id_arr.size == 0:
            raise ValueError("ids must be a non-empty 1-d integer array")
        id_arr = np.sort(id_arr)
        if np.any(id_arr[1:] == id_arr[:-1]):
            raise ValueError(f"duplicate ids in vocabulary {name!r}")
        self.name = str(name)
        self.ids = id_arr
        self.dim = int(dim)
        if self.dim <= 0:
            raise ValueError("embedding dimension must be positive")
        if weights is None:
            gen = torch.Generator().manual_seed(int(seed) & (2**63 - 1))
            weights = torch.randn(id_arr.size, self.dim, generator=gen, dtype=DTYPE)
        else:
            weights = torch.as_tensor(np.asarray(weights, dtype=np.float64)).clone()
            if weights.shape != (id_arr.size, self.dim):
                raise ValueError(f"weights must have shape {(id_arr.size, self.dim)}, got {tuple(weights.shape)}")
        self.weights = weights.requires_grad_(True)

    def __len__(self) -> int:
        return int(self.ids.size)

    def indices_of(self, ids) -> np.ndarray:
        """Positions of the given ids in the sorted vocabulary."""
        query = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, query)
        safe = np.minimum(pos, self.ids.size - 1)
        missing = (pos >= self.ids.size) | (self.ids[safe] != query)
        if np.any(missing):
            unknown = np.unique(query[missing])[:5]
            raise KeyError(f"unknown {self.name} ids: {unknown.tolist()}")
        return pos

    def embed(self, ids) -> torch.Tensor:
        """Coordinate rows for the given ids, with gradients attached."""
        idx = torch.from_numpy(self.indices_of(ids))
        return torch.index_select(self.weights, 0, idx)

    def to_payload(self) -> dict:
        return {
            "name": self.name,
            "ids": self.ids.tolist(),
            "dim": self.dim,
            "weights": encode_array(self.weights.detach().numpy()),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "EmbeddingTable":
        return cls(payload["name"], payload["ids"], payload["dim"], weights=decode_array(payload["weights"]))


class FeatureMap:
    """Raw design matrix to covariance inputs.

    The first ``numeric_dim`` columns pass through unchanged; each
    remaining column holds integer ids for the embedding table at the
    same position, and is replaced by that table's coordinates. The
    mapped width is ``numeric_dim + sum of table dims``.
    """

    def __init__(self, numeric_dim: int, tables=()):
        self.numeric_dim = int(numeric_dim)
        self.tables = tuple(tables)
        if self.numeric_dim < 0:
            raise ValueError("numeric_dim must be non-negative")
        if self.numeric_dim == 0 and not self.tables:
            raise ValueError("a feature map needs at least one column")

    @classmethod
    def identity(cls, dim: int) -> "FeatureMap":
        """All columns numeric; the map is a dtype-only passthrough."""
        return cls(numeric_dim=dim)

    @property
    def raw_dim(self) -> int:
        return self.numeric_dim + len(self.tables)

    @property
    def feature_dim(self) -> int:
        return self.numeric_dim + sum(t.dim for t in self.tables)

    def transform(self, raw: np.ndarray) -> torch.Tensor:
        """Map raw rows to a float64 tensor of covariance inputs."""
        arr = np.asarray(raw, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != self.raw_dim:
            raise ValueError(f"raw input must have shape (n, {self.raw_dim}), got {arr.shape}")
        cols: list[torch.Tensor] = []
        if self.numeric_dim:
            cols.append(torch.from_numpy(np.ascontiguousarray(arr[:, : self.numeric_dim])))
        for j, table in enumerate(self.tables):
            raw_ids = arr[:, self.numeric_dim + j]
            ids = raw_ids.astype(np.int64)
            if np.any(ids != raw_ids):
                raise ValueError(f"column {self.numeric_dim + j} must hold integer ids for {table.name!r}")
            cols.append(table.embed(ids))
        return cols[0] if len(cols) == 1 else torch.cat(cols, dim=1)

    def parameters(self) -> list[torch.Tensor]:
        """Trainable tensors owned by this map (one weight matrix per table)."""
        return [t.weights for t in self.tables]

    def to_payload(self) -> dict:
        return {"numeric_dim": self.numeric_dim, "tables": [t.to_payload() for t in self.tables]}

    @classmethod
    def from_payload(cls, payload: dict) -> "FeatureMap":
        return cls(payload["numeric_dim"], [EmbeddingTable.from_payload(p) for p in payload["tables"]])
