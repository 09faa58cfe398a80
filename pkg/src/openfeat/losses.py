"""Episode losses and their exact gradients.

Four training objectives share one forward/backward routine:

* ``baseline`` -- episodic cross-entropy against support prototypes; only the
  backbone proxy is trained.
* ``openset`` -- baseline minus ``beta`` times the summed entropy of unseen
  queries against the same prototypes.
* ``feat`` -- query cross-entropy against adapted prototypes plus ``alpha``
  times a contrastive term on adapted support+query instances.
* ``openfeat`` -- feat minus ``beta`` times the unseen-query entropy against
  the adapted prototypes.

All sums are unnormalized; logs are natural.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .adapter import (
    PARAM_NAMES, AdapterParams, adapt_backward_cached, adapt_forward,
    backbone_apply, backbone_backward,
)
from .embedcore import DomainError, PrototypeSet, ScoringConfig, class_means

MODES = ("baseline", "feat", "openset", "openfeat")
# A shared offset cancels in every unadapted squared distance, so backbone_b
# has an exactly zero gradient there and is not trained.
TRAINABLE = {
    "baseline": ("backbone_L",),
    "openset": ("backbone_L",),
    "feat": PARAM_NAMES,
    "openfeat": PARAM_NAMES,
}
QUERY_STREAM, INSTANCE_STREAM = 0, 1


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.1
    mode: str = "openfeat"

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0 or self.beta < 0:
            raise DomainError("alpha and beta must be non-negative")


def cross_entropy(true_label, probs, labels) -> float:
    labels = list(labels)
    if true_label not in labels:
        raise DomainError(f"label {true_label!r} not among {labels}")
    return float(-np.log(np.asarray(probs, dtype=np.float64)[labels.index(true_label)]))


def entropy(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _head(Z, P, tau, targets):
    """Sum of CE (targets >= 0) or entropy (targets == -1) terms, unit weights."""
    n = Z.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(Z), np.zeros_like(P)
    return _kernels.proto_head(Z, P, tau, np.asarray(targets, dtype=np.int64), np.ones(n))


def _mask_seed(mask_seed, stream):
    return None if mask_seed is None else (int(mask_seed), stream)


def _scatter_means(d_means, labels, n_classes):
    """Backward of :func:`class_means`: each member gets its class grad / count."""
    counts = np.bincount(labels, minlength=n_classes)
    return d_means[labels] / counts[labels][:, None]


def _run(ep, params: AdapterParams, score_cfg: ScoringConfig, mode, mask_seed, need_grad):
    """Forward (and optionally backward) pass.

    Returns ``(terms, grads)`` where ``terms`` holds the unweighted sums
    ``query``, ``contrastive`` and ``entropy`` and ``grads`` maps each term to a
    dict of parameter gradients (None when ``need_grad`` is False).
    """
    if score_cfg.distance_kind != "scaled_euclidean":
        raise DomainError("training losses use the scaled Euclidean distance")
    tau = score_cfg.temperature
    N = ep.n_way
    S, Qs, U = ep.support, ep.seen_queries, ep.unseen_queries
    Sb, Qb, Ub = (backbone_apply(params, X) for X in (S, Qs, U))
    P = class_means(Sb, ep.support_labels, N)
    adapted = mode in ("feat", "openfeat")
    use_entropy = mode in ("openset", "openfeat") and len(U) > 0

    terms = {"query": 0.0, "contrastive": 0.0, "entropy": 0.0}
    if adapted:
        Pa, cache_p = adapt_forward(params, P, _mask_seed(mask_seed, QUERY_STREAM))
    else:
        Pa = P
    terms["query"], dQb_q, dPa_q = _head(Qb, Pa, tau, ep.query_labels)
    if use_entropy:
        terms["entropy"], dUb_h, dPa_h = _head(Ub, Pa, tau, -np.ones(len(Ub), dtype=np.int64))
    if adapted:
        inst = np.vstack([Sb, Qb])
        inst_labels = np.concatenate([ep.support_labels, ep.query_labels])
        Ia, cache_i = adapt_forward(params, inst, _mask_seed(mask_seed, INSTANCE_STREAM))
        C = class_means(Ia, inst_labels, N)
        terms["contrastive"], dIa_c, dC = _head(Ia, C, tau, inst_labels)
    if not need_grad:
        return terms, None

    X_all = np.vstack([S, Qs, U])
    nS, nQ = len(S), len(Qs)

    def backprop(dSb, dQb, dUb, attn=None):
        dX = np.vstack([dSb, dQb, dUb])
        g = {name: np.zeros_like(getattr(params, name)) for name in PARAM_NAMES}
        g.update(backbone_backward(X_all, dX))
        if attn is not None:
            for name, val in attn.items():
                if name != "X":
                    g[name] = val
        return g

    zero_Q, zero_U = np.zeros_like(Qb), np.zeros_like(Ub)
    grads = {}

    def through_prototypes(dPa):
        if adapted:
            ga = adapt_backward_cached(cache_p, dPa)
            return _scatter_means(ga["X"], ep.support_labels, N), ga
        return _scatter_means(dPa, ep.support_labels, N), None

    dSb, attn = through_prototypes(dPa_q)
    grads["query"] = backprop(dSb, dQb_q, zero_U, attn)
    if use_entropy:
        dSb, attn = through_prototypes(dPa_h)
        grads["entropy"] = backprop(dSb, zero_Q, dUb_h, attn)
    if adapted:
        dIa = dIa_c + _scatter_means(dC, inst_labels, N)
        gi = adapt_backward_cached(cache_i, dIa)
        grads["contrastive"] = backprop(gi["X"][:nS], gi["X"][nS:nS + nQ], zero_U, gi)
    return terms, grads


def _combine(terms, loss_cfg: LossConfig):
    mode = loss_cfg.mode
    if mode == "baseline":
        return terms["query"]
    if mode == "openset":
        return terms["query"] - loss_cfg.beta * terms["entropy"]
    feat = terms["query"] + loss_cfg.alpha * terms["contrastive"]
    if mode == "feat":
        return feat
    return feat - loss_cfg.beta * terms["entropy"]


def episode_loss(ep, params, score_cfg, loss_cfg: LossConfig, mask_seed=None) -> float:
    terms, _ = _run(ep, params, score_cfg, loss_cfg.mode, mask_seed, need_grad=False)
    return float(_combine(terms, loss_cfg))


def open_set_loss(ep, protos: PrototypeSet, cfg: ScoringConfig, beta) -> float:
    """Seen-query CE minus ``beta`` times unseen-query entropy, unadapted prototypes."""
    tau = cfg.temperature
    ce, _, _ = _head(ep.seen_queries, protos.prototypes, tau, ep.query_labels)
    if len(ep.unseen_queries) == 0:
        return float(ce)
    h, _, _ = _head(ep.unseen_queries, protos.prototypes, tau,
                    -np.ones(len(ep.unseen_queries), dtype=np.int64))
    return float(ce - beta * h)


def feat_loss(ep, params, score_cfg, alpha, mask_seed=None) -> float:
    return episode_loss(ep, params, score_cfg, LossConfig(alpha, 0.0, "feat"), mask_seed)


def openfeat_loss(ep, params, score_cfg, loss_cfg: LossConfig, mask_seed=None) -> float:
    cfg = LossConfig(loss_cfg.alpha, loss_cfg.beta, "openfeat")
    return episode_loss(ep, params, score_cfg, cfg, mask_seed)


def unseen_entropy_sum(ep, params, score_cfg, mask_seed=None) -> float:
    """Summed entropy of unseen queries against the adapted prototypes."""
    terms, _ = _run(ep, params, score_cfg, "openfeat", mask_seed, need_grad=False)
    return float(terms["entropy"])


def loss_gradients(ep, params, score_cfg, loss_cfg: LossConfig, mask_seed=None):
    """Return ``(loss, grads)`` with a gradient array for every parameter name.

    Parameters outside the mode's trainable set get exact zeros.
    """
    terms, g = _run(ep, params, score_cfg, loss_cfg.mode, mask_seed, need_grad=True)
    weights = {"query": 1.0}
    if loss_cfg.mode in ("feat", "openfeat"):
        weights["contrastive"] = loss_cfg.alpha
    if loss_cfg.mode in ("openset", "openfeat"):
        weights["entropy"] = -loss_cfg.beta
    total = {name: np.zeros_like(getattr(params, name)) for name in PARAM_NAMES}
    for term, w in weights.items():
        if term in g and w != 0:
            for name in PARAM_NAMES:
                total[name] += w * g[term][name]
    for name in PARAM_NAMES:
        if name not in TRAINABLE[loss_cfg.mode]:
            total[name][...] = 0.0
    return float(_combine(terms, loss_cfg)), total
