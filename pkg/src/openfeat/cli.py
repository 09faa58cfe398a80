"""Command-line pipeline: bank -> model -> households -> results.

Every option may also come from a JSON object given with ``--config``; keys
are option names with dashes turned into underscores (``group_pull``), either
at top level or under a section named after the subcommand. Flags given on
the command line win over the file.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from .adapter import ModelFormatError, load_model, save_model
from .bank import BankFormatError, GenParams, generate_bank, load_bank, save_bank, split_bank
from .embedcore import DomainError
from .episodes import EpisodeConfig
from .evaluate import (
    ScoreRecords, ieer_by_size, pca_export, score_histogram_export, score_household,
    summarize_runs, write_pca_csv, write_scores_csv,
)
from .households import (
    BankTooEasyError, HouseholdConfig, adapt_household, load_households, save_households,
    simulate_runs,
)
from .losses import MODES, LossConfig
from .trainer import TrainConfig, save_report, train

log = logging.getLogger("openfeat")

DEFAULTS = {
    "gen-bank": dict(speakers=60, utts=30, dim=64, groups=12, group_pull=0.7, spread=0.3, seed=0),
    "split-bank": dict(parts=2),
    "train": dict(
        mode="openfeat", alpha=None, beta=None, episodes=16000, seed=0, lr=1e-3,
        temperature=1 / 32, heads=1, dropout=0.5, clip_norm=10.0, backbone_scale=None,
        n_seen=10, k_support=4, m_query=5, r_unseen=5, t_query=5, progress=0, report=None,
    ),
    "simulate": dict(
        size=[2, 3, 4, 5, 6, 7], count=10, runs=5, percentile=85.0, seed=0,
        enroll_utts=4, eval_utts=10, guests_per_member=50, profile_cap=100, max_retries=100,
    ),
    "evaluate": dict(
        model=None, baseline_model=None, bank=None, no_adapt=False, confidence=0.95,
        export_scores=None, export_pca=None, pca_size=4, bins=20,
    ),
    "verify": dict(configs=5, seed=0),
}
REQUIRED = {
    "gen-bank": ("out",),
    "split-bank": ("bank", "out"),
    "train": ("bank", "out"),
    "simulate": ("bank", "out"),
    "evaluate": ("households", "out"),
    "verify": (),
}


class UsageError(Exception):
    pass


def _write_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# --- subcommands ------------------------------------------------------------

def cmd_gen_bank(a):
    params = GenParams(a.speakers, a.utts, a.dim, a.spread, a.groups, a.group_pull, a.seed)
    bank = generate_bank(params)
    save_bank(bank, a.out)
    print(f"speakers={len(bank)}\tutterances={int(bank.counts().sum())}\tdim={bank.dim}")


def cmd_split_bank(a):
    if len(a.out) != a.parts:
        raise UsageError(f"--out needs {a.parts} paths, got {len(a.out)}")
    bank = load_bank(a.bank)
    for part, path in zip(split_bank(bank, a.parts), a.out):
        save_bank(part, path)
        print(f"{path}\tspeakers={len(part)}")


def _loss_config(a):
    uses_alpha = a.mode in ("feat", "openfeat")
    uses_beta = a.mode in ("openset", "openfeat")
    if a.alpha is not None and not uses_alpha:
        raise DomainError(f"--alpha has no effect in mode {a.mode!r}")
    if a.beta is not None and not uses_beta:
        raise DomainError(f"--beta has no effect in mode {a.mode!r}")
    alpha = (0.5 if a.alpha is None else a.alpha) if uses_alpha else 0.0
    beta = (0.1 if a.beta is None else a.beta) if uses_beta else 0.0
    return LossConfig(alpha, beta, a.mode)


def cmd_train(a):
    cfg = TrainConfig(
        episodes=a.episodes, lr0=a.lr, clip_norm=a.clip_norm, temperature=a.temperature,
        heads=a.heads, dropout_rate=a.dropout, backbone_scale=a.backbone_scale,
        loss_cfg=_loss_config(a),
        episode_cfg=EpisodeConfig(a.n_seen, a.k_support, a.m_query, a.r_unseen, a.t_query, a.seed),
        seed=a.seed,
    )
    cfg.validate()
    bank = load_bank(a.bank)
    params, report = train(bank, cfg, progress_every=a.progress)
    save_model(params, a.out)
    report_path = a.report or os.path.splitext(a.out)[0] + ".report.json"
    save_report(report, report_path)
    tail = report.loss_trace[-min(50, len(report.loss_trace)):]
    mean_tail = float(np.mean(tail)) if tail else float("nan")
    print(f"mode={a.mode}\tepisodes={a.episodes}\tfinal_mean_loss={mean_tail:.6f}"
          f"\tchecksum={report.params_checksum}")


def cmd_simulate(a):
    cfg = HouseholdConfig(
        enroll_utts=a.enroll_utts, eval_utts=a.eval_utts, guests_per_member=a.guests_per_member,
        similarity_percentile=a.percentile, profile_utt_cap=a.profile_cap,
        households_per_run=a.count, runs=a.runs, seed=a.seed, max_retries=a.max_retries,
    )
    for n in a.size:
        HouseholdConfig(size_n=n).validate()
    cfg.validate()
    bank = load_bank(a.bank)
    households = simulate_runs(bank, cfg, a.size)
    save_households(households, cfg, a.size, a.bank, a.out)
    print(f"households={len(households)}\tsizes={','.join(map(str, a.size))}\truns={a.runs}")


def _resolve_bank(a, doc):
    if a.bank:
        return load_bank(a.bank)
    path = doc["bank"]
    if not os.path.exists(path):
        alt = os.path.join(os.path.dirname(os.path.abspath(a.households)), path)
        if os.path.exists(alt):
            path = alt
    return load_bank(path)


def _summaries(by_size, confidence):
    return {n: summarize_runs(v, confidence) for n, v in by_size.items()}


def _pct(x):
    return f"{100 * x:.2f}"


def cmd_evaluate(a):
    with open(a.households) as fh:
        doc = json.load(fh)
    bank = _resolve_bank(a, doc)
    households, _ = load_households(a.households, bank)
    if not households:
        raise DomainError("household file is empty")
    model = base_model = None
    if a.model:
        model = load_model(a.model)
    if a.baseline_model:
        base_model = load_model(a.baseline_model)
    for m in (model, base_model):
        if m is not None and m.dim != households[0].profiles.shape[1]:
            raise DomainError(
                f"dimension mismatch: model dim {m.dim}, households dim {households[0].profiles.shape[1]}"
            )
    model_mode = None if model is None else model.train_config_echo.get("loss_cfg", {}).get("mode")
    adapted = model is not None and not a.no_adapt and model_mode in ("feat", "openfeat")
    if adapted:
        households = [adapt_household(model, hh) for hh in households]

    base = _summaries(ieer_by_size(households, base_model, False), a.confidence)
    result = {
        "baseline": {"model": a.baseline_model, "scoring": "unadapted"},
        "confidence": a.confidence,
        "ci_method": "student-t",
        "aggregation": "records pooled over the households of one size within a run",
        "households": a.households,
        "sizes": {},
    }
    if model is not None:
        result["model"] = {"path": a.model, "mode": model_mode,
                           "scoring": "adapted" if adapted else "unadapted"}
        mod = _summaries(ieer_by_size(households, model, adapted), a.confidence)

    header = ["n", "baseline_ieer", "baseline_ci"]
    if model is not None:
        header += ["model_ieer", "model_ci", "rel_improvement"]
    print("\t".join(header))
    for n, s in base.items():
        entry = {"baseline": vars(s)}
        row = [str(n), _pct(s.mean), _pct(s.ci_halfwidth)]
        if model is not None:
            m = mod[n]
            rel = (s.mean - m.mean) / s.mean if s.mean > 0 else None
            entry["model"] = vars(m)
            entry["relative_improvement"] = rel
            row += [_pct(m.mean), _pct(m.ci_halfwidth), "nan" if rel is None else _pct(rel)]
        result["sizes"][str(n)] = entry
        print("\t".join(row))

    out_dir = os.path.dirname(a.out)
    if a.export_scores is not None:
        path = a.export_scores or os.path.join(out_dir, "scores.csv")
        sets = {"baseline": ScoreRecords.concat(score_household(h, False, base_model) for h in households)}
        if model is not None:
            sets["model"] = ScoreRecords.concat(score_household(h, adapted, model) for h in households)
        write_scores_csv(sets, path)
        result["score_histograms"] = {k: score_histogram_export(v, a.bins) for k, v in sets.items()}
        result["scores_csv"] = path
    if a.export_pca is not None:
        path = a.export_pca or os.path.join(out_dir, "pca.csv")
        pick = [i for i, h in enumerate(households) if h.size == a.pca_size]
        if not pick:
            raise DomainError(f"no household of size {a.pca_size} for the PCA export")
        rows, comps = pca_export(households[pick[0]], model if adapted else None)
        write_pca_csv(rows, path)
        result["pca"] = {"csv": path, "household_index": pick[0], "components": comps.tolist()}
    _write_json(result, a.out)


def cmd_verify(a):
    from ._oracle import run_verification

    rows = run_verification(a.configs, a.seed)
    print("check\tresult\tdetail")
    for name, ok, detail in rows:
        print(f"{name}\t{'PASS' if ok else 'FAIL'}\t{detail}")
    if not all(ok for _, ok, _ in rows):
        raise RuntimeError("verification failed")


COMMANDS = {
    "gen-bank": cmd_gen_bank, "split-bank": cmd_split_bank, "train": cmd_train,
    "simulate": cmd_simulate, "evaluate": cmd_evaluate, "verify": cmd_verify,
}


# --- argument handling --------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="openfeat", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_const", const=True, default=None)
    sub = p.add_subparsers(dest="command", metavar="{gen-bank,split-bank,train,simulate,evaluate}")
    sub.required = True

    def parser(name, help):
        sp = sub.add_parser(name, help=help) if help else sub.add_parser(name)
        sp.add_argument("--config", help="JSON file with option values (flags override)")
        return sp

    g = parser("gen-bank", "draw a synthetic speaker bank")
    g.add_argument("--speakers", type=int)
    g.add_argument("--utts", type=int, help="utterances per speaker")
    g.add_argument("--dim", type=int)
    g.add_argument("--groups", type=int, help="similarity groups")
    g.add_argument("--group-pull", type=float)
    g.add_argument("--spread", type=float, help="within-speaker noise scale")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")

    s = parser("split-bank", "split a bank into disjoint speaker sets")
    s.add_argument("--bank")
    s.add_argument("--parts", type=int)
    s.add_argument("--out", nargs="+")

    t = parser("train", "episodic training of backbone and adapter")
    t.add_argument("--bank")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--episodes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--temperature", type=float)
    t.add_argument("--heads", type=int)
    t.add_argument("--dropout", type=float)
    t.add_argument("--clip-norm", type=float)
    t.add_argument("--backbone-scale", type=float, help="initial backbone L = scale * I (default sqrt(dim))")
    for name in ("n-seen", "k-support", "m-query", "r-unseen", "t-query"):
        t.add_argument(f"--{name}", type=int)
    t.add_argument("--progress", type=int, help="log mean loss every N episodes")
    t.add_argument("--report", help="report path (default: <out>.report.json)")
    t.add_argument("--out")

    h = parser("simulate", "simulate households")
    h.add_argument("--bank")
    h.add_argument("--size", type=int, nargs="+")
    h.add_argument("--count", type=int, help="households per size per run")
    h.add_argument("--runs", type=int)
    h.add_argument("--percentile", type=float)
    h.add_argument("--seed", type=int)
    h.add_argument("--enroll-utts", type=int)
    h.add_argument("--eval-utts", type=int)
    h.add_argument("--guests-per-member", type=int)
    h.add_argument("--profile-cap", type=int)
    h.add_argument("--max-retries", type=int)
    h.add_argument("--out")

    e = parser("evaluate", "IEER per household size")
    e.add_argument("--households")
    e.add_argument("--model")
    e.add_argument("--baseline-model", help="score the baseline column with this model, unadapted")
    e.add_argument("--bank", help="override the bank path stored in the household file")
    e.add_argument("--no-adapt", action="store_const", const=True)
    e.add_argument("--confidence", type=float)
    e.add_argument("--export-scores", nargs="?", const="", metavar="CSV")
    e.add_argument("--export-pca", nargs="?", const="", metavar="CSV")
    e.add_argument("--pca-size", type=int)
    e.add_argument("--bins", type=int)
    e.add_argument("--out")

    v = parser("verify", None)
    v.add_argument("--configs", type=int)
    v.add_argument("--seed", type=int)
    return p


def _apply_config(args):
    if not args.config:
        return
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{args.config}: expected a JSON object")
    values = {k: v for k, v in doc.items() if k not in COMMANDS}
    section = doc.get(args.command, {})
    if not isinstance(section, dict):
        raise UsageError(f"{args.config}: section {args.command!r} must be an object")
    values.update(section)
    for key, val in values.items():
        key = key.replace("-", "_")
        if key in ("command", "config") or not hasattr(args, key):
            raise UsageError(f"{args.config}: unknown option {key!r} for {args.command}")
        if getattr(args, key) is None:
            setattr(args, key, val)


def _finish_args(args):
    _apply_config(args)
    for key, val in DEFAULTS[args.command].items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command] if not getattr(args, k, None)]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        _finish_args(args)
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"openfeat: error: {exc}", file=sys.stderr)
        return 2
    except BankTooEasyError as exc:
        print(f"openfeat: error: {exc}", file=sys.stderr)
        return 1
    except (DomainError, BankFormatError, ModelFormatError, ValueError, KeyError) as exc:
        print(f"openfeat: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, FloatingPointError) as exc:
        print(f"openfeat: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
