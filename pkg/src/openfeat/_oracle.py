"""Independent verification oracles (not public API).

Nothing here calls the arithmetic it checks: losses are recomputed with plain
Python loops over lists, IEER by a dense threshold sweep, and gradients by
central differences. Used by the test suite and the hidden ``verify`` command.
"""
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    step: float
    tol: float
    max_rel_err: dict = field(default_factory=dict)

    @property
    def worst(self):
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self):
        return self.worst < self.tol


def rel_err(a, f):
    return abs(a - f) / max(abs(a), abs(f), 1e-12)


def finite_diff_grad(loss_fn, params, step=1e-4, names=None):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params``.

    ``params`` maps names to float arrays that ``loss_fn`` reads; entries are
    perturbed in place and restored.
    """
    out = {}
    for name in names or list(params):
        arr = params[name]
        g = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            orig = float(arr[idx])
            arr[idx] = orig + step
            up = loss_fn()
            arr[idx] = orig - step
            down = loss_fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def grad_check(analytic, numeric, step=1e-4, tol=1e-4):
    rep = GradCheckReport(step, tol)
    for name, num in numeric.items():
        ana = analytic[name]
        rep.max_rel_err[name] = max(
            (rel_err(float(a), float(f)) for a, f in zip(np.ravel(ana), np.ravel(num))),
            default=0.0,
        )
    return rep


# --- IEER by exhaustive threshold sweep -------------------------------------

def brute_force_ieer(guest_scores, enrolled_scores, enrolled_correct, grid=10 ** 4):
    """IEER from FAR/FNIR evaluated at ``grid + 1`` uniform thresholds on [0, 1]."""
    guests = [float(s) for s in guest_scores]
    enrolled = [(float(s), bool(c)) for s, c in zip(enrolled_scores, enrolled_correct)]
    prev = None
    for k in range(grid + 1):
        th = k / grid
        far = sum(1 for s in guests if s >= th) / len(guests)
        fnir = sum(1 for s, c in enrolled if (not c) or s < th) / len(enrolled)
        d = far - fnir
        if d <= 0:
            if d == 0 or prev is None:
                return far
            pfar, pd = prev
            t = pd / (pd - d)
            return pfar + t * (far - pfar)
        prev = (far, d)
    return None


# --- straight-line forward math ---------------------------------------------

def _matvec_rows(X, W):
    """Rows of X (lists) times matrix W (nested lists): X @ W."""
    cols = len(W[0])
    return [[sum(x[k] * W[k][j] for k in range(len(x))) for j in range(cols)] for x in X]


def _layer_norm(row, gain, bias, eps=1e-5):
    n = len(row)
    mu = sum(row) / n
    var = sum((v - mu) ** 2 for v in row) / n
    s = math.sqrt(var + eps)
    return [(v - mu) / s * g + b for v, g, b in zip(row, gain, bias)]


def _softmax(xs):
    mx = max(xs)
    e = [math.exp(x - mx) for x in xs]
    tot = sum(e)
    return [v / tot for v in e]


def reference_attention(X, p, mask=None):
    """Self-attention block on a list of row vectors; ``p`` maps names to lists."""
    m, heads = len(X[0]), p["heads"]
    Q = _matvec_rows(X, p["W_Q"])
    K = _matvec_rows(X, p["W_K"])
    V = _matvec_rows(X, p["W_V"])
    n = len(X)
    O = [[0.0] * (heads * m) for _ in range(n)]
    for h in range(heads):
        lo = h * m
        for i in range(n):
            logits = [sum(Q[i][lo + t] * K[j][lo + t] for t in range(m)) / math.sqrt(m)
                      for j in range(n)]
            a = _softmax(logits)
            for t in range(m):
                O[i][lo + t] = sum(a[j] * V[j][lo + t] for j in range(n))
    F = _matvec_rows(O, p["W_FC"])
    out = []
    for i in range(n):
        row = [F[i][t] * (mask[i][t] if mask is not None else 1.0) + X[i][t] for t in range(m)]
        out.append(_layer_norm(row, p["ln_gain"], p["ln_bias"]))
    return out


def _means(X, labels, n_classes):
    out = []
    for c in range(n_classes):
        rows = [x for x, y in zip(X, labels) if y == c]
        out.append([sum(col) / len(rows) for col in zip(*rows)])
    return out


def _log_probs(z, protos, tau):
    s = [-tau * sum((a - b) ** 2 for a, b in zip(z, p)) for p in protos]
    mx = max(s)
    lse = mx + math.log(sum(math.exp(v - mx) for v in s))
    return [v - lse for v in s]


def _mask(rate, shape, seed):
    if rate == 0:
        return None
    keep = np.random.Generator(np.random.PCG64(seed)).random(shape) >= rate
    return [[(1.0 / (1.0 - rate)) if k else 0.0 for k in row] for row in keep]


def reference_terms(ep, params, tau, mask_seed=None, adapted=True):
    """Unweighted loss sums ``query``, ``contrastive``, ``entropy`` for one episode.

    ``mask_seed=None`` disables dropout; otherwise the query-path mask uses
    seed ``(mask_seed, 0)`` and the instance path ``(mask_seed, 1)``.
    """
    p = {k: np.asarray(v).tolist() for k, v in params.arrays().items()}
    p["heads"] = params.heads
    L, b = p["backbone_L"], p["backbone_b"]

    def bb(X):
        return [[sum(L[i][k] * x[k] for k in range(len(x))) + b[i] for i in range(len(b))]
                for x in np.asarray(X).tolist()]

    S, Qs, U = bb(ep.support), bb(ep.seen_queries), bb(ep.unseen_queries)
    s_lab, q_lab = list(map(int, ep.support_labels)), list(map(int, ep.query_labels))
    N = ep.n_way
    P = _means(S, s_lab, N)
    rate = params.dropout_rate
    if adapted:
        m0 = None if mask_seed is None else _mask(rate, (len(P), len(P[0])), (int(mask_seed), 0))
        P = reference_attention(P, p, m0)
    query = sum(-_log_probs(z, P, tau)[y] for z, y in zip(Qs, q_lab))
    ent = 0.0
    for z in U:
        lp = _log_probs(z, P, tau)
        ent -= sum(math.exp(v) * v for v in lp)
    contrastive = 0.0
    if adapted:
        inst = S + Qs
        lab = s_lab + q_lab
        m1 = None if mask_seed is None else _mask(rate, (len(inst), len(inst[0])), (int(mask_seed), 1))
        Ia = reference_attention(inst, p, m1)
        C = _means(Ia, lab, N)
        contrastive = sum(-_log_probs(z, C, tau)[y] for z, y in zip(Ia, lab))
    return {"query": query, "contrastive": contrastive, "entropy": ent}


def reference_loss(ep, params, tau, mode, alpha, beta, mask_seed=None):
    t = reference_terms(ep, params, tau, mask_seed, adapted=mode in ("feat", "openfeat"))
    if mode == "baseline":
        return t["query"]
    if mode == "openset":
        return t["query"] - beta * t["entropy"]
    total = t["query"] + alpha * t["contrastive"]
    return total - beta * t["entropy"] if mode == "openfeat" else total


# --- runner for the `verify` command ----------------------------------------

def _tiny_episode(rng, dim, n_way=2, k=2, m=2, r=2, t=2):
    from .episodes import Episode

    def draw(n):
        return rng.normal(size=(n, dim))

    return Episode(
        support=draw(n_way * k), support_labels=np.repeat(np.arange(n_way), k),
        seen_queries=draw(n_way * m), query_labels=np.repeat(np.arange(n_way), m),
        unseen_queries=draw(r * t), seen_labels=[f"s{i}" for i in range(n_way)],
        unseen_ids=[f"u{i}" for i in range(r)], support_refs=[], query_refs=[], unseen_refs=[],
    )


def random_setup(seed, dim=4, heads=1):
    """Random perturbed parameters and a tiny random episode."""
    from .adapter import AdapterParams

    rng = np.random.default_rng(seed)
    params = AdapterParams.init(dim, heads=heads, dropout_rate=0.5, rng=rng)
    for name, arr in params.arrays().items():
        arr += 0.3 * rng.normal(size=arr.shape)
    n_way = int(rng.integers(2, 4))
    return params, _tiny_episode(rng, dim, n_way=n_way)


def run_verification(configs=5, seed=0):
    """Return a list of ``(check, passed, detail)`` rows."""
    from .embedcore import ScoringConfig
    from .evaluate import ScoreRecords, curve_and_ieer
    from .losses import TRAINABLE, LossConfig, episode_loss, loss_gradients

    rows = []
    score_cfg = ScoringConfig(0.5)
    for mode in ("baseline", "openset", "feat", "openfeat"):
        worst_g = worst_l = 0.0
        for c in range(configs):
            params, ep = random_setup(seed * 1000 + c)
            lc = LossConfig(0.5, 0.1, mode)
            loss, grads = loss_gradients(ep, params, score_cfg, lc, mask_seed=c)
            arrays = params.arrays()
            num = finite_diff_grad(
                lambda: episode_loss(ep, params, score_cfg, lc, mask_seed=c),
                arrays, names=TRAINABLE[mode],
            )
            worst_g = max(worst_g, grad_check(grads, num).worst)
            ref = reference_loss(ep, params, 0.5, mode, 0.5, 0.1, mask_seed=c)
            worst_l = max(worst_l, rel_err(loss, ref))
        rows.append((f"gradient {mode}", worst_g < 1e-4, f"max rel err {worst_g:.2e}"))
        rows.append((f"loss vs reference {mode}", worst_l < 1e-10, f"max rel err {worst_l:.2e}"))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(configs * 4):
        g, e, ok = random_records(rng)
        got = curve_and_ieer(ScoreRecords.from_scores(g, e, ok)).ieer
        worst = max(worst, abs(got - brute_force_ieer(g, e, ok)))
    rows.append(("ieer vs threshold sweep", worst < 1e-6, f"max abs diff {worst:.2e}"))
    return rows


def random_records(rng, lo=10, hi=500, lattice=2003):
    """Random guest/enrolled scores on the lattice k/lattice (spacing > 1/grid)."""
    n = int(rng.integers(lo, hi + 1))
    n_g = int(rng.integers(1, n))
    n_e = n - n_g
    g = rng.integers(1, lattice, size=n_g) / lattice
    shift = rng.uniform(0.0, 0.4)
    e = np.clip(rng.integers(1, lattice, size=n_e) / lattice + shift, 1 / lattice, 1 - 1 / lattice)
    ok = rng.random(n_e) >= rng.uniform(0.0, 0.3)
    return g, np.round(e * lattice) / lattice, ok
