"""Set-to-set embedding adaptation: a single-layer self-attention block over a
set of embeddings, plus a linear backbone proxy ``x -> L x + b``.

Sets are (n, dim) arrays with one element per row, so the learnable
projections act on the right: ``Q = X @ W_Q`` with ``W_Q`` of shape
(dim, heads * dim), and ``W_FC`` of shape (heads * dim, dim).
"""
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .embedcore import LN_EPS, DomainError, PrototypeSet

ATTN_PARAMS = ("W_Q", "W_K", "W_V", "W_FC", "ln_gain", "ln_bias")
BACKBONE_PARAMS = ("backbone_L", "backbone_b")
PARAM_NAMES = ATTN_PARAMS + BACKBONE_PARAMS


class ModelFormatError(ValueError):
    pass


@dataclass
class AdapterParams:
    dim: int
    heads: int
    dropout_rate: float
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_FC: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    backbone_L: np.ndarray
    backbone_b: np.ndarray
    train_config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        m, hm = self.dim, self.heads * self.dim
        expected = {
            "W_Q": (m, hm), "W_K": (m, hm), "W_V": (m, hm), "W_FC": (hm, m),
            "ln_gain": (m,), "ln_bias": (m,), "backbone_L": (m, m), "backbone_b": (m,),
        }
        for name, shape in expected.items():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DomainError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        if not 0 <= self.dropout_rate < 1:
            raise DomainError("dropout_rate must lie in [0, 1)")

    @classmethod
    def init(cls, dim, heads=1, dropout_rate=0.5, rng=None, backbone_scale=1.0):
        """Glorot-uniform projections, unit gain, zero bias, backbone
        ``backbone_scale * I`` (identity by default)."""
        rng = np.random.default_rng(0) if rng is None else rng
        hm = heads * dim

        def glorot(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        return cls(
            dim=dim, heads=heads, dropout_rate=dropout_rate,
            W_Q=glorot(dim, hm), W_K=glorot(dim, hm), W_V=glorot(dim, hm),
            W_FC=glorot(hm, dim),
            ln_gain=np.ones(dim), ln_bias=np.zeros(dim),
            backbone_L=backbone_scale * np.eye(dim), backbone_b=np.zeros(dim),
        )

    def arrays(self):
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self):
        return AdapterParams(
            self.dim, self.heads, self.dropout_rate,
            **{k: v.copy() for k, v in self.arrays().items()},
            train_config_echo=dict(self.train_config_echo),
        )

    def checksum(self):
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def to_json(self):
        doc = {"dim": self.dim, "heads": self.heads, "dropout_rate": self.dropout_rate}
        doc.update({k: v.tolist() for k, v in self.arrays().items()})
        doc["train_config_echo"] = self.train_config_echo
        return doc

    @classmethod
    def from_json(cls, doc):
        try:
            return cls(
                dim=int(doc["dim"]), heads=int(doc["heads"]),
                dropout_rate=float(doc["dropout_rate"]),
                **{k: np.array(doc[k], dtype=np.float64) for k in PARAM_NAMES},
                train_config_echo=doc.get("train_config_echo", {}),
            )
        except KeyError as exc:
            raise ModelFormatError(f"model file missing field {exc.args[0]!r}") from exc


def save_model(params: AdapterParams, path):
    with open(path, "w") as fh:
        json.dump(params.to_json(), fh)
        fh.write("\n")


def load_model(path) -> AdapterParams:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return AdapterParams.from_json(doc)


def backbone_apply(params: AdapterParams, x):
    """``L x + b`` for one embedding or row-wise for an (n, dim) array."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.dim:
        raise DomainError(f"dimension mismatch: input {x.shape[-1]}, backbone {params.dim}")
    return x @ params.backbone_L.T + params.backbone_b


def backbone_backward(x, upstream):
    return {"backbone_L": upstream.T @ x, "backbone_b": upstream.sum(axis=0)}


def dropout_mask(rate, shape, mask_seed):
    """Inverted-dropout scale factors (0 or 1/(1-rate)); None when rate is 0."""
    if rate == 0:
        return None
    rng = np.random.Generator(np.random.PCG64(mask_seed))
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _check_set(params, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise DomainError("adaptation needs a non-empty (n, dim) set")
    if X.shape[1] != params.dim:
        raise DomainError(f"dimension mismatch: set dim {X.shape[1]}, model dim {params.dim}")
    return X


def adapt_forward(params: AdapterParams, X, mask_seed=None):
    """Run the attention block on set ``X``; returns ``(Y, cache)``.

    ``mask_seed=None`` is eval mode: no dropout, and the set is processed in a
    canonical (lexicographic) row order so the result is exactly permutation
    equivariant. With a seed it is train mode with a positional dropout mask.
    """
    X = _check_set(params, X)
    if mask_seed is None:
        order = np.lexsort(X.T[::-1])
        Xs = X[order]
        mask = None
    else:
        order = None
        Xs = X
        mask = dropout_mask(params.dropout_rate, X.shape, mask_seed)
    Ys, kcache = _kernels.attn_forward(
        Xs, params.W_Q, params.W_K, params.W_V, params.W_FC, mask,
        params.ln_gain, params.ln_bias, params.heads, LN_EPS,
    )
    if order is None:
        return Ys, (None, kcache)
    Y = np.empty_like(Ys)
    Y[order] = Ys
    return Y, (order, kcache)


def adapt_backward_cached(cache, dY):
    order, kcache = cache
    if order is None:
        return _kernels.attn_backward(kcache, dY)
    grads = _kernels.attn_backward(kcache, np.asarray(dY)[order])
    dX = np.empty_like(grads["X"])
    dX[order] = grads["X"]
    grads["X"] = dX
    return grads


def adapt_set(params: AdapterParams, inputs, mode="eval", mask_seed=None):
    """Adapt a prototype set (or bare (n, dim) array); output keeps order and labels."""
    if mode not in ("train", "eval"):
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and mask_seed is None:
        raise DomainError("train mode needs a mask_seed")
    seed = mask_seed if mode == "train" else None
    if isinstance(inputs, PrototypeSet):
        Y, _ = adapt_forward(params, inputs.prototypes, seed)
        return PrototypeSet(Y, inputs.labels)
    Y, _ = adapt_forward(params, inputs, seed)
    return Y


def adapt_backward(params: AdapterParams, inputs, upstream_grads, mask_seed=None):
    """Gradients of ``sum(upstream_grads * adapt_set(inputs))`` w.r.t. the
    attention parameters (keys of ``ATTN_PARAMS``) and the inputs (``"X"``).

    ``mask_seed`` must be the one used for the paired train-mode forward;
    None means eval mode.
    """
    X = inputs.prototypes if isinstance(inputs, PrototypeSet) else inputs
    Y, cache = adapt_forward(params, X, mask_seed)
    dY = np.asarray(upstream_grads, dtype=np.float64)
    if dY.shape != Y.shape:
        raise DomainError(f"upstream gradient shape {dY.shape} != output shape {Y.shape}")
    return adapt_backward_cached(cache, dY)
