"""Simulation of hard-to-discriminate households from a speaker bank."""
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adapter import AdapterParams, adapt_set, backbone_apply
from .bank import SpeakerBank
from .embedcore import DomainError, scaled_cosine_matrix
from .rng import numpy_rng

GUEST = "GUEST"


class BankTooEasyError(DomainError):
    pass


@dataclass(frozen=True)
class HouseholdConfig:
    size_n: int = 2
    enroll_utts: int = 4
    eval_utts: int = 10
    guests_per_member: int = 50
    similarity_percentile: float = 85.0
    profile_utt_cap: int = 100
    households_per_run: int = 10
    runs: int = 5
    seed: int = 0
    max_retries: int = 100

    def validate(self):
        if not 2 <= self.size_n <= 7:
            raise DomainError(f"household size must lie in [2, 7], got {self.size_n}")
        if not 0 < self.similarity_percentile < 100:
            raise DomainError("similarity_percentile must lie in (0, 100)")
        if min(self.enroll_utts, self.eval_utts, self.guests_per_member,
               self.profile_utt_cap, self.households_per_run, self.runs) < 1:
            raise DomainError("household counts must be positive")


@dataclass
class Household:
    """Members, their enrollment/eval utterances and the guest utterances.

    ``enroll_refs``/``eval_refs`` hold per-member utterance indices into the
    bank; ``guest_refs`` holds ``(speaker_id, index)`` pairs.
    """

    member_ids: list
    enrollment: list
    profiles: np.ndarray
    evals: np.ndarray
    eval_labels: list
    guests: np.ndarray
    enroll_refs: list
    eval_refs: list
    guest_refs: list
    adapted_profiles: np.ndarray = None
    run: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def size(self):
        return len(self.member_ids)


def speaker_level_profiles(bank: SpeakerBank, cap: int, rng: np.random.Generator) -> dict:
    """Mean of up to ``cap`` randomly chosen utterances per speaker."""
    out = {}
    for sid, u in zip(bank.speaker_ids, bank.utterances):
        k = min(cap, len(u))
        picks = rng.choice(len(u), size=k, replace=False)
        out[sid] = u[np.sort(picks)].mean(axis=0)
    return out


def _as_matrix(profiles):
    if isinstance(profiles, dict):
        return np.array(list(profiles.values()))
    return np.asarray(profiles, dtype=np.float64)


def pair_percentile(pair_scores, percentile: float) -> float:
    """Linear-interpolation percentile of a list of pair scores."""
    if not 0 <= percentile <= 100:
        raise DomainError("percentile must lie in [0, 100]")
    return float(np.percentile(np.asarray(pair_scores, dtype=np.float64), percentile,
                               method="linear"))


def similarity_threshold(profiles, percentile: float) -> float:
    """Percentile of scaled cosine over all unordered pairs of profiles."""
    X = _as_matrix(profiles)
    if len(X) < 2:
        raise DomainError("need at least 2 speaker profiles")
    S = scaled_cosine_matrix(X, X)
    iu = np.triu_indices(len(X), k=1)
    return pair_percentile(S[iu], percentile)


def _grow(S, seed, size, threshold):
    members = [seed]
    free = np.ones(len(S), dtype=bool)
    free[seed] = False
    while len(members) < size:
        cand = np.flatnonzero(free)
        if len(cand) == 0:
            return None
        score = S[np.ix_(cand, members)].mean(axis=1)
        best = int(np.argmax(score))
        if score[best] < threshold:
            return None
        members.append(int(cand[best]))
        free[cand[best]] = False
    return members


def simulate_household(bank: SpeakerBank, cfg: HouseholdConfig, rng: np.random.Generator,
                       profiles=None, threshold=None) -> Household:
    """Greedy growth of a mutually similar household, then utterance sampling.

    Starting from a random seed speaker, repeatedly add the unused eligible
    speaker with the highest mean scaled cosine to the current members while
    that mean stays at or above ``threshold``; on failure retry from another
    seed speaker, at most ``cfg.max_retries`` times.
    """
    cfg.validate()
    if profiles is None:
        profiles = speaker_level_profiles(bank, cfg.profile_utt_cap, rng)
    if threshold is None:
        threshold = similarity_threshold(profiles, cfg.similarity_percentile)
    need = cfg.enroll_utts + cfg.eval_utts
    counts = bank.counts()
    eligible = np.flatnonzero(counts >= need)
    if len(eligible) < cfg.size_n:
        raise DomainError(
            f"only {len(eligible)} speakers have >= {need} utterances; need {cfg.size_n}"
        )
    P = np.array([profiles[bank.speaker_ids[i]] for i in eligible])
    S = scaled_cosine_matrix(P, P)
    seeds = rng.permutation(len(eligible))[: cfg.max_retries]
    members = None
    for s in seeds:
        members = _grow(S, int(s), cfg.size_n, threshold)
        if members is not None:
            break
    if members is None:
        raise BankTooEasyError(
            f"bank too easy for threshold {threshold:.4f}: no {cfg.size_n}-member household "
            f"after {len(seeds)} attempts (raise group_pull or lower the percentile)"
        )
    member_idx = [int(eligible[m]) for m in members]

    enrollment, enroll_refs, eval_refs, evals, eval_labels = [], [], [], [], []
    for spk in member_idx:
        picks = rng.choice(counts[spk], size=need, replace=False)
        u = bank.utterances[spk]
        enrollment.append(u[picks[: cfg.enroll_utts]])
        evals.append(u[picks[cfg.enroll_utts:]])
        enroll_refs.append([int(j) for j in picks[: cfg.enroll_utts]])
        eval_refs.append([int(j) for j in picks[cfg.enroll_utts:]])
        eval_labels += [bank.speaker_ids[spk]] * cfg.eval_utts

    taken = set(member_idx)
    outside = [i for i in range(len(bank)) if i not in taken]
    pool = [(i, j) for i in outside for j in range(counts[i])]
    n_guests = cfg.guests_per_member * cfg.size_n
    if len(pool) < n_guests:
        raise DomainError(f"need {n_guests} guest utterances, only {len(pool)} outside the household")
    chosen = rng.choice(len(pool), size=n_guests, replace=False)
    guest_refs = [(bank.speaker_ids[pool[c][0]], int(pool[c][1])) for c in chosen]
    guests = np.array([bank.utterances[pool[c][0]][pool[c][1]] for c in chosen])

    return Household(
        member_ids=[bank.speaker_ids[i] for i in member_idx],
        enrollment=enrollment,
        profiles=np.array([e.mean(axis=0) for e in enrollment]),
        evals=np.vstack(evals),
        eval_labels=eval_labels,
        guests=guests,
        enroll_refs=enroll_refs,
        eval_refs=eval_refs,
        guest_refs=guest_refs,
        meta={"threshold": threshold},
    )


def adapt_household(params: AdapterParams, hh: Household) -> Household:
    """Precompute adapted profiles (eval mode) from backbone-mapped profiles."""
    if hh.profiles.shape[1] != params.dim:
        raise DomainError(
            f"dimension mismatch: household dim {hh.profiles.shape[1]}, model dim {params.dim}"
        )
    adapted = adapt_set(params, backbone_apply(params, hh.profiles), mode="eval")
    return replace(hh, adapted_profiles=adapted)


def simulate_runs(bank: SpeakerBank, cfg: HouseholdConfig, sizes):
    """``cfg.runs`` independent runs; each run recomputes speaker profiles and
    the threshold, then draws ``households_per_run`` households per size."""
    out = []
    for run in range(cfg.runs):
        profiles = speaker_level_profiles(bank, cfg.profile_utt_cap,
                                          numpy_rng(cfg.seed, "profiles", run))
        threshold = similarity_threshold(profiles, cfg.similarity_percentile)
        for n in sizes:
            sub = replace(cfg, size_n=int(n))
            rng = numpy_rng(cfg.seed, f"households/n={n}", run)
            for _ in range(cfg.households_per_run):
                hh = simulate_household(bank, sub, rng, profiles, threshold)
                hh.run = run
                out.append(hh)
    return out


def save_households(households, cfg: HouseholdConfig, sizes, bank_path, path):
    doc = {
        "config": asdict(cfg),
        "sizes": [int(n) for n in sizes],
        "bank": str(bank_path),
        "households": [
            {
                "run": hh.run,
                "size": hh.size,
                "threshold": hh.meta.get("threshold"),
                "members": hh.member_ids,
                "profiles": hh.profiles.tolist(),
                "enrollment": hh.enroll_refs,
                "eval": hh.eval_refs,
                "guests": [list(g) for g in hh.guest_refs],
                **({"adapted_profiles": hh.adapted_profiles.tolist()}
                   if hh.adapted_profiles is not None else {}),
            }
            for hh in households
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_households(path, bank: SpeakerBank = None):
    """Read a household file; utterances are resolved against ``bank`` (or the
    bank path recorded in the file). Returns ``(households, doc)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if bank is None:
        from .bank import load_bank

        bank = load_bank(doc["bank"])
    out = []
    for i, rec in enumerate(doc["households"]):
        try:
            enrollment = [bank.utts(sid)[idx] for sid, idx in zip(rec["members"], rec["enrollment"])]
            evals = np.vstack([bank.utts(sid)[idx] for sid, idx in zip(rec["members"], rec["eval"])])
            guests = np.array([bank.utts(sid)[idx] for sid, idx in rec["guests"]])
        except (KeyError, IndexError) as exc:
            raise DomainError(f"households[{i}] does not match the bank: {exc}") from exc
        adapted = rec.get("adapted_profiles")
        out.append(Household(
            member_ids=list(rec["members"]),
            enrollment=enrollment,
            profiles=np.array([e.mean(axis=0) for e in enrollment]),
            evals=evals,
            eval_labels=[sid for sid, idx in zip(rec["members"], rec["eval"]) for _ in idx],
            guests=guests,
            enroll_refs=rec["enrollment"],
            eval_refs=rec["eval"],
            guest_refs=[tuple(g) for g in rec["guests"]],
            adapted_profiles=None if adapted is None else np.array(adapted),
            run=int(rec["run"]),
            meta={"threshold": rec.get("threshold")},
        ))
    return out, doc
