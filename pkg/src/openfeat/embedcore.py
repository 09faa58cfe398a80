"""Embedding primitives: prototypes, scaled distances and cosines, softmax
classification over a prototype set, and layer normalization."""
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels

DEFAULT_TEMPERATURE = 1.0 / 32.0
LN_EPS = 1e-5


class DomainError(ValueError):
    """An operation was called outside its domain (shape, emptiness, range)."""


@dataclass(frozen=True)
class ScoringConfig:
    temperature: float = DEFAULT_TEMPERATURE
    distance_kind: str = "scaled_euclidean"

    def __post_init__(self):
        if not self.temperature > 0:
            raise DomainError(f"temperature must be positive, got {self.temperature}")
        if self.distance_kind not in ("scaled_euclidean", "scaled_cosine"):
            raise DomainError(f"unknown distance_kind {self.distance_kind!r}")


@dataclass
class PrototypeSet:
    """Order-aligned prototypes (one row per class) and their labels."""

    prototypes: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.prototypes = np.atleast_2d(np.asarray(self.prototypes, dtype=np.float64))
        self.labels = list(self.labels)
        if len(self.labels) != self.prototypes.shape[0]:
            raise DomainError(
                f"{self.prototypes.shape[0]} prototypes but {len(self.labels)} labels"
            )
        if len(set(self.labels)) != len(self.labels):
            raise DomainError("prototype labels must be distinct")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.prototypes.shape[1]


def as_embedding(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DomainError(f"embedding must be a non-empty vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError("embedding has non-finite entries")
    return v


def _check_same_dim(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise DomainError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def prototype_mean(class_embeddings: Sequence) -> np.ndarray:
    """Element-wise mean of a non-empty list of same-dimension embeddings."""
    if len(class_embeddings) == 0:
        raise DomainError("cannot average an empty list of embeddings")
    try:
        arr = np.asarray(class_embeddings, dtype=np.float64)
    except ValueError as exc:
        raise DomainError("embeddings must share one dimension") from exc
    if arr.ndim != 2:
        raise DomainError("embeddings must share one dimension")
    return arr.mean(axis=0)


def class_means(X: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Row means of ``X`` grouped by integer label in ``range(n_classes)``."""
    out = np.zeros((n_classes, X.shape[1]))
    np.add.at(out, labels, X)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        raise DomainError("every class needs at least one member")
    return out / counts[:, None]


def scaled_euclidean_dist(a, b, cfg: ScoringConfig = ScoringConfig()) -> float:
    """``temperature * ||a - b||^2``; larger means more dissimilar."""
    a, b = as_embedding(a), as_embedding(b)
    _check_same_dim(a, b)
    d = a - b
    return float(cfg.temperature * (d @ d))


def scaled_cosine(a, b) -> float:
    """Cosine similarity mapped to [0, 1] via ``(cos + 1) / 2``."""
    a, b = as_embedding(a), as_embedding(b)
    _check_same_dim(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("scaled_cosine is undefined for a zero vector")
    c = float(a @ b) / (na * nb)
    return (min(1.0, max(-1.0, c)) + 1.0) / 2.0


def scaled_cosine_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise scaled cosine between the rows of ``A`` and the rows of ``B``."""
    _check_same_dim(A, B)
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DomainError("scaled_cosine is undefined for a zero vector")
    C = (A / na[:, None]) @ (B / nb[:, None]).T
    return (np.clip(C, -1.0, 1.0) + 1.0) / 2.0


def classify(query, protos: PrototypeSet, cfg: ScoringConfig = ScoringConfig()) -> np.ndarray:
    """Softmax over negative scaled distances from ``query`` to each prototype.

    Accepts a single embedding or an (n, dim) batch; returns probabilities
    order-aligned with ``protos.labels``.
    """
    if len(protos) == 0:
        raise DomainError("empty prototype set")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    Z = np.atleast_2d(q)
    _check_same_dim(Z, protos.prototypes)
    if cfg.distance_kind == "scaled_cosine":
        # dissimilarity 1 - scaled_cosine, multiplied by the temperature
        logits = -cfg.temperature * (1.0 - scaled_cosine_matrix(Z, protos.prototypes))
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
    else:
        p = np.exp(_kernels.proto_logprobs(Z, protos.prototypes, cfg.temperature))
    return p[0] if single else p


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> np.ndarray:
    """Normalize to zero mean and unit population variance, then ``gain * . + bias``.

    Works on a vector or row-wise on a 2-D array.
    """
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if not eps > 0:
        raise DomainError("eps must be positive")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DomainError(
            f"length mismatch: x {x.shape[-1]}, gain {gain.shape}, bias {bias.shape}"
        )
    xc = x - x.mean(axis=-1, keepdims=True)
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + bias
