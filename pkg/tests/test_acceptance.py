"""Acceptance criteria 1-8. Each test records one PASS/FAIL line, collected in
the "acceptance criteria" section at the end of the pytest run.

Pinned setup for the end-to-end criteria (5-7):
  bank      GenParams(480 speakers, 40 utts, dim 64, spread 0.08, 6 groups, pull 0.7)
            split by split_bank: even speakers train, odd speakers evaluate
  seeds     seed set s uses bank seed s, household seed s + 10, train seed s + 20
  training  2000 episodes per mode, alpha 0.5, beta 0.1, other defaults
  households sizes 2..7, 20 per size per run, 5 runs
"""
import filecmp
import functools
import itertools
import json
import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from openfeat import _kernels
from openfeat._oracle import brute_force_ieer, random_records, random_setup, run_verification
from openfeat.adapter import AdapterParams, adapt_set
from openfeat.bank import GenParams, generate_bank, split_bank
from openfeat.cli import main
from openfeat.embedcore import ScoringConfig
from openfeat.evaluate import (
    ScoreRecords, curve_and_ieer, ieer_by_size, pca_export, score_household, write_pca_csv,
)
from openfeat.households import HouseholdConfig, simulate_runs
from openfeat.losses import (
    LossConfig, entropy, episode_loss, feat_loss, openfeat_loss, unseen_entropy_sum,
)
from openfeat.trainer import TrainConfig, train

from conftest import BACKENDS

SIZES = range(2, 8)
MODES = ("baseline", "openset", "feat", "openfeat")
ADAPTED = ("feat", "openfeat")
SEED_SETS = (1, 2, 3, 4, 5)
PRIMARY_SEED = 1

GRAD_TOL = 1e-4
GRAD_BUDGET_S = 120.0
IEER_TOL = 1e-6
ENTROPY_SLACK = 1e-12  # rounding allowance on the [0, ln N] bounds
RHO_MIN = 0.8
REL_REDUCTION_MIN = 0.10
ORTHO_TOL = 1e-8


@functools.lru_cache(maxsize=None)
def households_for(s):
    bank = generate_bank(GenParams(480, 40, 64, 0.08, 6, 0.7, seed=s))
    train_bank, eval_bank = split_bank(bank)
    hh = simulate_runs(eval_bank, HouseholdConfig(households_per_run=20, runs=5, seed=s + 10),
                       SIZES)
    return train_bank, hh


@functools.lru_cache(maxsize=None)
def model_for(s, mode):
    train_bank, _ = households_for(s)
    params, _ = train(train_bank, TrainConfig(episodes=2000, loss_cfg=LossConfig(0.5, 0.1, mode),
                                              seed=s + 20))
    return params


def mean_ieer(s, mode):
    _, hh = households_for(s)
    by_size = ieer_by_size(hh, model_for(s, mode), use_adapted=mode in ADAPTED)
    return {n: float(np.mean(v)) for n, v in by_size.items()}


# --- 1 ----------------------------------------------------------------------

def test_criterion_1_gradients(acceptance_report):
    start = time.perf_counter()
    worst, failed = 0.0, []
    prev = _kernels.BACKEND
    try:
        for name in BACKENDS:
            _kernels.use_backend(name)
            for check, ok, detail in run_verification(configs=20, seed=0):
                if check.startswith("gradient"):
                    worst = max(worst, float(detail.rsplit(" ", 1)[1]))
                    if not ok:
                        failed.append(f"{name}:{check}")
    finally:
        _kernels.use_backend(prev)
    elapsed = time.perf_counter() - start
    passed = not failed and worst < GRAD_TOL and elapsed < GRAD_BUDGET_S
    acceptance_report(1, passed, f"20 configs x 4 modes x {BACKENDS}; max rel err {worst:.2e} "
                                 f"(< {GRAD_TOL:g}); {elapsed:.1f}s (< {GRAD_BUDGET_S:g}s)")
    assert passed, failed


# --- 2 ----------------------------------------------------------------------

def test_criterion_2_equivariance(acceptance_report):
    rng = np.random.default_rng(2)
    bad = 0
    prev = _kernels.BACKEND
    try:
        for name in BACKENDS:
            _kernels.use_backend(name)
            for _ in range(100):
                dim = int(rng.choice([4, 8, 16]))
                params = AdapterParams.init(dim, heads=int(rng.integers(1, 3)), rng=rng)
                X = rng.normal(size=(int(rng.integers(2, 8)), dim))
                perm = rng.permutation(len(X))
                if not np.array_equal(adapt_set(params, X[perm]), adapt_set(params, X)[perm]):
                    bad += 1
    finally:
        _kernels.use_backend(prev)
    acceptance_report(2, bad == 0, f"100 sets of size 2-7 per backend {BACKENDS}; "
                                   f"{bad} non-bitwise")
    assert bad == 0


# --- 3 ----------------------------------------------------------------------

def test_criterion_3_metric_oracle(acceptance_report):
    rng = np.random.default_rng(3)
    worst, non_monotone = 0.0, 0
    for _ in range(200):
        g, e, ok = random_records(rng)
        curve = curve_and_ieer(ScoreRecords.from_scores(g, e, ok))
        if np.any(np.diff(curve.far) > 0) or np.any(np.diff(curve.fnir) < 0):
            non_monotone += 1
        worst = max(worst, abs(curve.ieer - brute_force_ieer(g, e, ok)))
    passed = worst < IEER_TOL and non_monotone == 0
    acceptance_report(3, passed, f"200 record sets; max |diff| {worst:.2e} (< {IEER_TOL:g}); "
                                 f"{non_monotone} non-monotone curves")
    assert passed


# --- 4 ----------------------------------------------------------------------

def test_criterion_4_loss_identities(acceptance_report):
    sc = ScoringConfig(0.5)
    broken = 0
    for seed in range(50):
        params, ep = random_setup(seed)
        b = 0.1 + seed / 100
        f = feat_loss(ep, params, sc, 0.5, mask_seed=seed)
        h = unseen_entropy_sum(ep, params, sc, mask_seed=seed)
        checks = (
            openfeat_loss(ep, params, sc, LossConfig(0.5, b), mask_seed=seed) == f - b * h,
            openfeat_loss(ep, params, sc, LossConfig(0.5, 0.0), mask_seed=seed) == f,
            episode_loss(ep, params, sc, LossConfig(0.0, 0.0, "feat"), mask_seed=seed)
            == feat_loss(ep, params, sc, 0.0, mask_seed=seed),
            episode_loss(ep, params, sc, LossConfig(0.5, 0.0, "openset"))
            == episode_loss(ep, params, sc, LossConfig(0.5, 0.0, "baseline")),
        )
        broken += not all(checks)
    rng = np.random.default_rng(4)
    out_of_bounds = 0
    for i in range(1000):
        n = int(rng.integers(2, 12))
        if i % 10 == 0:
            p = np.full(n, 1.0 / n)
        elif i % 10 == 1:
            p = np.eye(n)[int(rng.integers(n))]
        else:
            p = rng.dirichlet(np.full(n, rng.uniform(0.05, 5.0)))
        h = entropy(p)
        out_of_bounds += not (-ENTROPY_SLACK <= h <= math.log(n) + ENTROPY_SLACK)
    passed = broken == 0 and out_of_bounds == 0
    acceptance_report(4, passed, f"50 setups, {broken} identity failures; "
                                 f"1000 prob vectors, {out_of_bounds} entropies outside [0, ln N]")
    assert passed


# --- 5 ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_directional_table(acceptance_report):
    start = time.perf_counter()
    res = {mode: mean_ieer(PRIMARY_SEED, mode) for mode in MODES}
    elapsed = time.perf_counter() - start
    base = res["baseline"]
    rho = spearmanr(list(SIZES), [base[n] for n in SIZES]).statistic
    wins = all(res["openfeat"][n] < res[m][n] for n in (2, 3, 4)
               for m in ("feat", "openset", "baseline"))
    rel = float(np.mean([(base[n] - res["openfeat"][n]) / base[n] for n in SIZES]))
    passed = rho >= RHO_MIN and wins and rel >= REL_REDUCTION_MIN
    table = "; ".join(f"{m} " + " ".join(f"{100 * res[m][n]:.2f}" for n in SIZES) for m in MODES)
    acceptance_report(5, passed, f"(a) rho {rho:.3f} (>= {RHO_MIN}); (b) openfeat best at "
                                 f"n=2,3,4: {wins}, mean rel reduction {100 * rel:.1f}% "
                                 f"(>= {100 * REL_REDUCTION_MIN:.0f}%); {elapsed:.0f}s; "
                                 f"IEER% n=2..7: {table}")
    assert passed


# --- 6 ----------------------------------------------------------------------

def mean_gb(hh, params, use_adapted):
    return float(np.mean(np.concatenate(
        [score_household(h, use_adapted, params).gb for h in hh])))


@pytest.mark.slow
def test_criterion_6_guest_scores(acceptance_report):
    # Same households, same openFEAT model: adapted profiles vs the model's
    # unadapted (backbone-only) profiles.
    adapted, unadapted = [], []
    for s in SEED_SETS:
        _, hh = households_for(s)
        params = model_for(s, "openfeat")
        adapted.append(mean_gb(hh, params, True))
        unadapted.append(mean_gb(hh, params, False))
    a, u = float(np.mean(adapted)), float(np.mean(unadapted))
    per_seed = " ".join(f"{x:.4f}/{y:.4f}" for x, y in zip(adapted, unadapted))
    acceptance_report(6, a < u, f"mean GB adapted {a:.4f} vs unadapted {u:.4f} over seeds "
                                f"{list(SEED_SETS)} (adapted/unadapted: {per_seed})")
    assert a < u


# --- 7 ----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_pca(acceptance_report, tmp_path):
    _, hh = households_for(PRIMARY_SEED)
    params = model_for(PRIMARY_SEED, "openfeat")
    four = [h for h in hh if h.size == 4]

    def spread(rows, kind):
        pts = np.array([r[2:] for r in rows if r[1] == kind])
        return np.mean([np.linalg.norm(p - q) for p, q in itertools.combinations(pts, 2)])

    pre, post, ortho = [], [], 0.0
    for h in four:
        rows, comps = pca_export(h, params)
        ortho = max(ortho, float(np.abs(comps @ comps.T - np.eye(2)).max()))
        pre.append(spread(rows, "profile_pre"))
        post.append(spread(rows, "profile_post"))
    rows, _ = pca_export(four[0], params)
    write_pca_csv(rows, tmp_path / "pca.csv")
    kinds = {line.split(",")[1] for line in (tmp_path / "pca.csv").read_text().splitlines()[1:]}
    all_kinds = kinds == {"profile_pre", "profile_post", "member_utt", "guest_utt"}
    pre_m, post_m = float(np.mean(pre)), float(np.mean(post))
    passed = all_kinds and ortho < ORTHO_TOL and post_m >= pre_m
    acceptance_report(7, passed, f"all four kinds: {all_kinds}; orthonormality err {ortho:.1e} "
                                 f"(< {ORTHO_TOL:g}); mean profile distance pre {pre_m:.3f} "
                                 f"post {post_m:.3f} over {len(four)} households")
    assert passed


# --- 8 ----------------------------------------------------------------------

PIPELINE = [
    ["gen-bank", "--speakers", "60", "--utts", "20", "--dim", "16", "--groups", "6",
     "--spread", "0.1", "--seed", "8", "--out", "bank.json"],
    ["split-bank", "--bank", "bank.json", "--out", "train.json", "eval.json"],
    ["train", "--bank", "train.json", "--episodes", "30", "--seed", "8", "--out", "model.json"],
    ["simulate", "--bank", "eval.json", "--size", "2", "4", "--count", "3", "--runs", "2",
     "--seed", "8", "--out", "households.json"],
    ["evaluate", "--households", "households.json", "--model", "model.json",
     "--out", "results.json", "--export-scores", "--export-pca"],
]


def test_criterion_8_cli_determinism(acceptance_report, tmp_path, monkeypatch):
    dirs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        monkeypatch.chdir(d)
        for argv in PIPELINE:
            assert main(argv) == 0, argv
        dirs.append(d)
    files = sorted(p.name for p in dirs[0].iterdir())
    reports = [json.loads((d / "model.report.json").read_text()) for d in dirs]
    for r in reports:
        r.pop("timing")  # wall-clock, labeled
    differ = [f for f in files if f != "model.report.json"
              and not filecmp.cmp(dirs[0] / f, dirs[1] / f, shallow=False)]
    if reports[0] != reports[1]:
        differ.append("model.report.json")
    passed = not differ
    acceptance_report(8, passed, f"{len(files)} outputs of {len(PIPELINE)} stages compared "
                                 f"byte for byte (report timing excluded); differing: {differ}")
    assert passed
