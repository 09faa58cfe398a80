"""Household scoring, FAR/FNIR curves, IEER with confidence intervals, and
the score-histogram and PCA exports."""
import csv
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .adapter import AdapterParams, backbone_apply
from .embedcore import DomainError, scaled_cosine_matrix
from .households import GUEST, Household, adapt_household


@dataclass
class ScoreRecords:
    """Best-match scores for enrolled-speaker and guest utterances.

    ``aa``/``ab`` are per enrolled utterance (own profile / closest other
    profile); ``gb`` is each guest's score to its closest profile.
    """

    enrolled_best: np.ndarray
    enrolled_correct: np.ndarray
    enrolled_truth: list
    enrolled_pred: list
    guest_best: np.ndarray
    aa: np.ndarray
    ab: np.ndarray

    @property
    def gb(self):
        return self.guest_best

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(
            enrolled_best=np.concatenate([p.enrolled_best for p in parts]),
            enrolled_correct=np.concatenate([p.enrolled_correct for p in parts]),
            enrolled_truth=[t for p in parts for t in p.enrolled_truth],
            enrolled_pred=[t for p in parts for t in p.enrolled_pred],
            guest_best=np.concatenate([p.guest_best for p in parts]),
            aa=np.concatenate([p.aa for p in parts]),
            ab=np.concatenate([p.ab for p in parts]),
        )

    @classmethod
    def from_scores(cls, guest_scores, enrolled_scores, enrolled_correct):
        """Bare records for metric work (no AA/AB detail)."""
        e = np.asarray(enrolled_scores, dtype=np.float64)
        c = np.asarray(enrolled_correct, dtype=bool)
        return cls(e, c, [None] * len(e), [None] * len(e),
                   np.asarray(guest_scores, dtype=np.float64),
                   np.full(len(e), np.nan), np.full(len(e), np.nan))


@dataclass
class EvalCurve:
    thresholds: np.ndarray
    far: np.ndarray
    fnir: np.ndarray
    ieer: float
    counts: dict


def household_embeddings(hh: Household, params: AdapterParams = None, use_adapted=False):
    """Profiles, eval utterances and guests in the space used for scoring."""
    if use_adapted:
        if params is None:
            raise DomainError("adapted scoring needs model parameters")
        if hh.adapted_profiles is None:
            hh = adapt_household(params, hh)
        profiles = hh.adapted_profiles
    else:
        profiles = hh.profiles if params is None else backbone_apply(params, hh.profiles)
    if params is None:
        return profiles, hh.evals, hh.guests
    return profiles, backbone_apply(params, hh.evals), backbone_apply(params, hh.guests)


def score_household(hh: Household, use_adapted=False, params: AdapterParams = None) -> ScoreRecords:
    """Score every eval and guest utterance against the household profiles."""
    if use_adapted and hh.adapted_profiles is None and params is None:
        raise DomainError("household has no adapted profiles")
    profiles, evals, guests = household_embeddings(hh, params, use_adapted)
    members = list(hh.member_ids)
    truth_idx = np.array([members.index(t) for t in hh.eval_labels])

    S = scaled_cosine_matrix(evals, profiles)
    best_idx = S.argmax(axis=1)
    rows = np.arange(len(S))
    aa = S[rows, truth_idx]
    others = S.copy()
    others[rows, truth_idx] = -np.inf
    ab = others.max(axis=1)

    G = scaled_cosine_matrix(guests, profiles)
    return ScoreRecords(
        enrolled_best=S[rows, best_idx],
        enrolled_correct=best_idx == truth_idx,
        enrolled_truth=list(hh.eval_labels),
        enrolled_pred=[members[i] for i in best_idx],
        guest_best=G.max(axis=1),
        aa=aa,
        ab=ab,
    )


def far_fnir(records: ScoreRecords, thresholds):
    """FAR and FNIR at each threshold; acceptance is ``score >= threshold``."""
    th = np.asarray(thresholds, dtype=np.float64)
    g = np.sort(records.guest_best)
    ok = np.sort(records.enrolled_best[records.enrolled_correct])
    n_e = len(records.enrolled_best)
    wrong = n_e - len(ok)
    far = (len(g) - np.searchsorted(g, th, side="left")) / len(g)
    fnir = (wrong + np.searchsorted(ok, th, side="left")) / n_e
    return far, fnir


def crossing(far, fnir):
    """Common value where FAR (nonincreasing) meets FNIR (nondecreasing).

    Takes the first sampled point with FAR <= FNIR: exact equality returns that
    value, otherwise both curves are interpolated linearly from the previous
    point. Without any such point, returns the mean at the closest approach.
    """
    diff = far - fnir
    hit = np.flatnonzero(diff <= 0)
    if len(hit) == 0:
        i = int(np.argmin(np.abs(diff)))
        return float((far[i] + fnir[i]) / 2)
    i = int(hit[0])
    if diff[i] == 0 or i == 0:
        return float(far[i])
    t = diff[i - 1] / (diff[i - 1] - diff[i])
    return float(far[i - 1] + t * (far[i] - far[i - 1]))


def curve_and_ieer(records: ScoreRecords) -> EvalCurve:
    n_e, n_g = len(records.enrolled_best), len(records.guest_best)
    if n_e == 0 or n_g == 0:
        raise DomainError("IEER needs at least one enrolled and one guest record")
    th = np.unique(np.concatenate([records.enrolled_best, records.guest_best, [0.0, 1.0]]))
    th = th[(th >= 0) & (th <= 1)]
    far, fnir = far_fnir(records, th)
    if np.any(np.diff(far) > 0) or np.any(np.diff(fnir) < 0):
        raise AssertionError("FAR/FNIR monotonicity violated")
    return EvalCurve(th, far, fnir, crossing(far, fnir),
                     {"enrolled_utts": n_e, "guest_utts": n_g})


@dataclass
class RunSummary:
    mean: float
    ci_halfwidth: float
    runs: list
    confidence: float
    method: str = "student-t"


def summarize_runs(per_run, confidence=0.95) -> RunSummary:
    """Mean and Student-t confidence half-width over independent runs."""
    x = np.asarray(per_run, dtype=np.float64)
    if len(x) < 2:
        raise DomainError("a confidence interval needs at least 2 runs")
    sd = x.std(ddof=1)
    t = stats.t.ppf((1 + confidence) / 2, len(x) - 1)
    return RunSummary(float(x.mean()), float(t * sd / np.sqrt(len(x))),
                      [float(v) for v in x], confidence)


def ieer_by_size(households, params: AdapterParams = None, use_adapted=False):
    """Pool the records of all households of one size within a run; one IEER
    per (size, run). Returns ``{size: [ieer_run0, ieer_run1, ...]}``."""
    pooled = {}
    for hh in households:
        rec = score_household(hh, use_adapted, params)
        pooled.setdefault(hh.size, {}).setdefault(hh.run, []).append(rec)
    return {
        n: [curve_and_ieer(ScoreRecords.concat(by_run[r])).ieer for r in sorted(by_run)]
        for n, by_run in sorted(pooled.items())
    }


def score_histogram_export(records: ScoreRecords, bins=20):
    """Equal-width histograms over [0, 1] for AA, AB and GB, plus means."""
    if bins < 2:
        raise DomainError("need at least 2 bins")
    out = {"bins": bins, "edges": np.linspace(0, 1, bins + 1).tolist()}
    for name, vals in (("AA", records.aa), ("AB", records.ab), ("GB", records.gb)):
        v = np.asarray(vals, dtype=np.float64)
        v = v[np.isfinite(v)]
        idx = np.clip(np.floor(v * bins).astype(int), 0, bins - 1)
        out[name] = {
            "counts": np.bincount(idx, minlength=bins).tolist(),
            "mean": float(v.mean()) if len(v) else None,
        }
    return out


def write_scores_csv(records_by_condition, path):
    """Long-format CSV ``condition,category,score`` for each named record set."""
    if isinstance(records_by_condition, ScoreRecords):
        records_by_condition = {"scores": records_by_condition}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["condition", "category", "score"])
        for cond, rec in records_by_condition.items():
            for name, vals in (("AA", rec.aa), ("AB", rec.ab), ("GB", rec.gb)):
                for v in vals:
                    if np.isfinite(v):
                        w.writerow([cond, name, repr(float(v))])


def _power_iteration(C, tol, max_iter, against=None):
    v = np.ones(C.shape[0]) / np.sqrt(C.shape[0])
    v += np.linspace(0.0, 1e-3, C.shape[0])  # break symmetry with the all-ones direction
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = C @ v
        if against is not None:
            w -= (w @ against) * against
        norm = np.linalg.norm(w)
        if norm == 0:
            return v, 0.0
        w /= norm
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            v = w
            break
        v = w
    return v, float(v @ C @ v)


def principal_components(X, tol=1e-10, max_iter=10000):
    """Top-2 principal axes by power iteration with deflation.

    Returns ``(mean, components)`` with components as rows; each axis is signed
    so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) < 3:
        raise DomainError("PCA needs at least 3 points")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / (len(X) - 1)
    scale = np.trace(C)
    if scale <= 0:
        raise DomainError("degenerate covariance: all points identical (rank 0)")
    v1, lam1 = _power_iteration(C, tol, max_iter)
    C2 = C - lam1 * np.outer(v1, v1)
    v2, lam2 = _power_iteration(C2, tol, max_iter, against=v1)
    if lam2 <= 1e-12 * scale:
        raise DomainError("degenerate covariance: rank < 2, no second principal axis")
    v2 -= (v2 @ v1) * v1
    v2 /= np.linalg.norm(v2)
    comps = np.vstack([v1, v2])
    signs = np.sign(comps[np.arange(2), np.abs(comps).argmax(axis=1)])
    return mean, comps * signs[:, None]


def pca_export(hh: Household, params: AdapterParams = None):
    """2-D coordinates of profiles (pre/post adaptation), member eval utterances
    and guests, in a PCA basis fit on the household's pre-adaptation
    enrollment, eval and guest embeddings.

    Returns ``(rows, components)`` with rows ``(label, kind, x, y)``.
    """
    profiles, evals, guests = household_embeddings(hh, params, use_adapted=False)
    enroll = np.vstack(hh.enrollment)
    if params is not None:
        enroll = backbone_apply(params, enroll)
    mean, comps = principal_components(np.vstack([enroll, evals, guests]))

    def proj(X):
        return (X - mean) @ comps.T

    rows = []
    for label, (x, y) in zip(hh.member_ids, proj(profiles)):
        rows.append((label, "profile_pre", float(x), float(y)))
    post = hh.adapted_profiles
    if post is None and params is not None:
        post = adapt_household(params, hh).adapted_profiles
    if post is not None:
        for label, (x, y) in zip(hh.member_ids, proj(post)):
            rows.append((label, "profile_post", float(x), float(y)))
    for label, (x, y) in zip(hh.eval_labels, proj(evals)):
        rows.append((label, "member_utt", float(x), float(y)))
    for x, y in proj(guests):
        rows.append((GUEST, "guest_utt", float(x), float(y)))
    return rows, comps


def write_pca_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "kind", "x", "y"])
        for label, kind, x, y in rows:
            w.writerow([label, kind, repr(x), repr(y)])
