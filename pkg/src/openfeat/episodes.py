"""N-way K-shot episodes with seen and unseen-speaker queries."""
from dataclasses import dataclass

import numpy as np

from .bank import SpeakerBank
from .embedcore import DomainError, PrototypeSet, class_means


@dataclass(frozen=True)
class EpisodeConfig:
    n_seen: int = 10
    k_support: int = 4
    m_query: int = 5
    r_unseen: int = 5
    t_query: int = 5
    seed: int = 0

    def validate(self):
        counts = (self.n_seen, self.k_support, self.m_query, self.r_unseen, self.t_query)
        if min(counts) < 1:
            raise DomainError(f"episode counts must all be >= 1, got {counts}")


@dataclass
class Episode:
    """One training task.

    ``support_labels`` / ``query_labels`` index into ``seen_labels``.
    ``*_refs`` hold ``(speaker_index, utterance_index)`` pairs into the bank;
    ``unseen_ids`` is kept for debugging only and never enters a loss.
    """

    support: np.ndarray
    support_labels: np.ndarray
    seen_queries: np.ndarray
    query_labels: np.ndarray
    unseen_queries: np.ndarray
    seen_labels: list
    unseen_ids: list
    support_refs: list
    query_refs: list
    unseen_refs: list

    @property
    def n_way(self):
        return len(self.seen_labels)

    @property
    def dim(self):
        return self.support.shape[1]


def sample_episode(bank: SpeakerBank, cfg: EpisodeConfig, rng: np.random.Generator) -> Episode:
    """Sample speakers without replacement, then disjoint support/query utterances."""
    cfg.validate()
    N, K, M, R, T = cfg.n_seen, cfg.k_support, cfg.m_query, cfg.r_unseen, cfg.t_query
    counts = bank.counts()
    seen_ok = np.flatnonzero(counts >= K + M)
    unseen_ok = counts >= T
    if len(seen_ok) < N:
        raise DomainError(
            f"insufficient speakers: need {N} with >= {K + M} utterances, bank has {len(seen_ok)}"
        )
    seen = rng.choice(seen_ok, size=N, replace=False)
    unseen_ok[seen] = False
    unseen_pool = np.flatnonzero(unseen_ok)
    if len(unseen_pool) < R:
        raise DomainError(
            f"insufficient speakers: need {N} seen + {R} unseen (>= {T} utterances), "
            f"only {len(unseen_pool)} remain for the unseen role"
        )
    unseen = rng.choice(unseen_pool, size=R, replace=False)

    support, s_lab, s_ref = [], [], []
    queries, q_lab, q_ref = [], [], []
    for c, spk in enumerate(seen):
        picks = rng.choice(counts[spk], size=K + M, replace=False)
        u = bank.utterances[spk]
        support.append(u[picks[:K]])
        queries.append(u[picks[K:]])
        s_lab += [c] * K
        q_lab += [c] * M
        s_ref += [(int(spk), int(j)) for j in picks[:K]]
        q_ref += [(int(spk), int(j)) for j in picks[K:]]
    unseen_q, u_ref = [], []
    for spk in unseen:
        picks = rng.choice(counts[spk], size=T, replace=False)
        unseen_q.append(bank.utterances[spk][picks])
        u_ref += [(int(spk), int(j)) for j in picks]

    return Episode(
        support=np.vstack(support),
        support_labels=np.array(s_lab),
        seen_queries=np.vstack(queries),
        query_labels=np.array(q_lab),
        unseen_queries=np.vstack(unseen_q),
        seen_labels=[bank.speaker_ids[s] for s in seen],
        unseen_ids=[bank.speaker_ids[s] for s in unseen],
        support_refs=s_ref,
        query_refs=q_ref,
        unseen_refs=u_ref,
    )


def support_prototypes(ep: Episode) -> PrototypeSet:
    return PrototypeSet(class_means(ep.support, ep.support_labels, ep.n_way), ep.seen_labels)
