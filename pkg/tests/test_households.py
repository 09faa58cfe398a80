import numpy as np
import pytest

from openfeat.adapter import AdapterParams, backbone_apply
from openfeat.bank import GenParams, SpeakerBank, generate_bank
from openfeat.embedcore import DomainError, layer_norm, scaled_cosine_matrix
from openfeat.households import (
    BankTooEasyError, HouseholdConfig, adapt_household, load_households, pair_percentile,
    save_households, similarity_threshold, simulate_household, simulate_runs,
    speaker_level_profiles,
)


@pytest.fixture(scope="module")
def bank():
    return generate_bank(GenParams(48, 20, 8, 0.2, 6, 0.7, seed=2))


def test_profiles_examples():
    r = np.random.default_rng(0)
    u1 = np.array([[1.0, 2.0]])
    u2 = np.array([[1.0, 0.0], [0.0, 1.0]])
    u30 = r.normal(size=(30, 2))
    b = SpeakerBank(2, ["a", "b", "c"], [u1, u2, u30])
    prof = speaker_level_profiles(b, 2, r)
    assert np.array_equal(prof["a"], [1.0, 2.0])
    assert np.allclose(prof["b"], [0.5, 0.5])
    prof = speaker_level_profiles(b, 100, r)
    assert np.allclose(prof["c"], u30.mean(axis=0), atol=1e-15)


def test_threshold_examples():
    assert pair_percentile([0.1, 0.2, 0.3, 0.4], 50) == pytest.approx(0.25, abs=1e-15)
    X = np.array([[1.0, 0.0], [0.6, 0.8]])
    pair = scaled_cosine_matrix(X, X)[0, 1]
    for p in (1, 50, 85, 99):
        assert similarity_threshold(X, p) == pytest.approx(pair, abs=1e-15)
    Y = np.random.default_rng(1).normal(size=(6, 3))
    S = scaled_cosine_matrix(Y, Y)
    assert pair_percentile(S[np.triu_indices(6, 1)], 100) == S[np.triu_indices(6, 1)].max()
    with pytest.raises(DomainError):
        similarity_threshold(X[:1], 50)


def _group_bank(seed):
    # one tight 4-speaker group inside 16 scattered speakers
    r = np.random.default_rng(seed)
    center = r.normal(size=16)
    utts = []
    for i in range(20):
        m = center + 0.15 * r.normal(size=16) if i < 4 else r.normal(size=16)
        m /= np.linalg.norm(m)
        utts.append(m + 0.05 * r.normal(size=(20, 16)))
    order = r.permutation(20)
    return SpeakerBank(16, [f"s{i}" for i in order], [utts[i] for i in order])


def test_finds_the_similar_group():
    hits = 0
    for seed in range(10):
        b = _group_bank(seed)
        # the group's 6 pairs are 3% of all 190, so the threshold must sit above
        # the 85th-percentile noise level of the scattered speakers
        hh = simulate_household(b, HouseholdConfig(size_n=4, similarity_percentile=95),
                                np.random.default_rng(seed))
        hits += set(hh.member_ids) == {"s0", "s1", "s2", "s3"}
    assert hits >= 9


def test_guest_count(bank):
    hh = simulate_household(bank, HouseholdConfig(size_n=2), np.random.default_rng(0))
    assert len(hh.guests) == 100 and len(hh.guest_refs) == 100
    assert hh.evals.shape == (20, 8) and len(hh.enrollment) == 2


def test_ineligible_never_selected():
    r = np.random.default_rng(0)
    base = r.normal(size=8)
    utts = [base + 0.01 * r.normal(size=(20 if i else 5, 8)) for i in range(12)]
    b = SpeakerBank(8, [f"s{i}" for i in range(12)], utts)
    for seed in range(10):
        hh = simulate_household(b, HouseholdConfig(size_n=3, similarity_percentile=10),
                                np.random.default_rng(seed))
        assert "s0" not in hh.member_ids


def test_invariants_over_draws(bank):
    cfg = HouseholdConfig(size_n=3, guests_per_member=10)
    prof = speaker_level_profiles(bank, cfg.profile_utt_cap, np.random.default_rng(0))
    th = similarity_threshold(prof, cfg.similarity_percentile)
    P = {k: v for k, v in prof.items()}
    for seed in range(100):
        n = 2 + seed % 6
        hh = simulate_household(bank, HouseholdConfig(size_n=n, guests_per_member=10),
                                np.random.default_rng(seed), prof, th)
        M = np.array([P[m] for m in hh.member_ids])
        S = scaled_cosine_matrix(M, M)
        assert S[np.triu_indices(n, 1)].mean() >= th
        assert len(set(hh.member_ids)) == n
        assert not {g for g, _ in hh.guest_refs} & set(hh.member_ids)
        assert len(set(hh.guest_refs)) == len(hh.guest_refs)
        for e, v in zip(hh.enroll_refs, hh.eval_refs):
            assert not set(e) & set(v)


def test_too_easy():
    r = np.random.default_rng(0)
    X = np.eye(10) * 1.0
    b = SpeakerBank(10, [f"s{i}" for i in range(10)],
                    [X[i] + 0.001 * r.normal(size=(20, 10)) for i in range(10)])
    with pytest.raises(BankTooEasyError, match="raise group_pull or lower the percentile"):
        simulate_household(b, HouseholdConfig(size_n=3), r, threshold=0.9)


def test_config_validation():
    for bad in (HouseholdConfig(size_n=1), HouseholdConfig(size_n=8),
                HouseholdConfig(similarity_percentile=100), HouseholdConfig(eval_utts=0)):
        with pytest.raises(DomainError):
            bad.validate()


def _zero_adapter(dim):
    p = AdapterParams.init(dim)
    for name in ("W_Q", "W_K", "W_V", "W_FC"):
        getattr(p, name)[...] = 0
    return p


def test_adapt_household(bank):
    hh = simulate_household(bank, HouseholdConfig(size_n=4), np.random.default_rng(1))
    z = _zero_adapter(8)
    z.backbone_L[...] = 2 * np.eye(8)
    out = adapt_household(z, hh)
    want = layer_norm(backbone_apply(z, hh.profiles), np.ones(8), np.zeros(8))
    assert np.allclose(out.adapted_profiles, want, atol=1e-14)
    p = AdapterParams.init(8, rng=np.random.default_rng(3))
    a = adapt_household(p, hh)
    assert np.array_equal(a.adapted_profiles, adapt_household(p, hh).adapted_profiles)
    perm = [2, 0, 3, 1]
    from dataclasses import replace
    hp = replace(hh, profiles=hh.profiles[perm], member_ids=[hh.member_ids[i] for i in perm])
    assert np.array_equal(adapt_household(p, hp).adapted_profiles, a.adapted_profiles[perm])
    with pytest.raises(DomainError):
        adapt_household(AdapterParams.init(4), hh)


def test_runs_deterministic_and_round_trip(bank, tmp_path):
    cfg = HouseholdConfig(households_per_run=2, runs=2, seed=4, guests_per_member=5)
    a = simulate_runs(bank, cfg, [2, 3])
    b = simulate_runs(bank, cfg, [2, 3])
    assert [h.member_ids for h in a] == [h.member_ids for h in b]
    assert [h.run for h in a] == [0, 0, 0, 0, 1, 1, 1, 1]
    save_households(a, cfg, [2, 3], "bank.json", tmp_path / "h1.json")
    save_households(b, cfg, [2, 3], "bank.json", tmp_path / "h2.json")
    assert (tmp_path / "h1.json").read_bytes() == (tmp_path / "h2.json").read_bytes()
    loaded, doc = load_households(tmp_path / "h1.json", bank)
    assert doc["sizes"] == [2, 3]
    for x, y in zip(a, loaded):
        assert x.member_ids == y.member_ids and x.run == y.run
        assert np.array_equal(x.profiles, y.profiles) and np.array_equal(x.guests, y.guests)
        assert x.eval_labels == y.eval_labels


def test_load_mismatch(bank, tmp_path):
    cfg = HouseholdConfig(households_per_run=1, runs=1, guests_per_member=5)
    hh = simulate_runs(bank, cfg, [2])
    save_households(hh, cfg, [2], "bank.json", tmp_path / "h.json")
    other = generate_bank(GenParams(10, 3, 8, 0.2, 2, 0.7, seed=1))
    with pytest.raises(DomainError, match="does not match the bank"):
        load_households(tmp_path / "h.json", other)
