"""Command-line entry point: enroll, score, evaluate, synth, make-spec.

Exit codes: 0 success, 1 internal error, 2 invalid input or config,
3 ENROLL_INSUFFICIENT, 4 CONFIG_MISMATCH, 5 EVAL_NEEDS_IMPOSTORS,
6 SPEC_INVALID, 7 SCORING_ERROR, 8 NUMERICAL_FAILURE. Errors are reported
on stderr as one JSON object ``{"error": CODE, "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .engine import AuthSession, sliding_means, summarize, threshold_from_means
from .errors import ConfigMismatchError, HmmAuthError, ScoringError
from .evaluation import load_corpus, protocol_run, write_outputs
from .evaluation import fused_scores
from .ingest import SegmentReport, parse_log
from .preprocess import process_log
from .synth import load_spec, random_population, sample_population, spec_to_dict
from .template import UserTemplate, enroll, owner_of, score_batch

MODE_FLAGS = {"balanced": "balanced", "zero-frr": "zero_frr_quantile", "zero-far": "zero_far_guard"}


def _read_gestures(path: str, cfg: RunConfig, fmt: str):
    log = parse_log(Path(path).read_bytes(), fmt, cfg.preprocess.reorder_ms)
    report = SegmentReport()
    gestures = process_log(log, cfg.preprocess, report)
    return log, gestures, report


def _calibrate(template: UserTemplate, holdout, cfg: RunConfig) -> dict:
    scores = fused_scores(score_batch(template, holdout))
    kmax = max(max(cfg.evaluation.k_grid), cfg.engine.k)
    table = {flag: {} for flag in MODE_FLAGS}
    for k in range(1, kmax + 1):
        means = sliding_means(scores, k)
        if len(means) == 0:
            break
        for flag, mode in MODE_FLAGS.items():
            table[flag][str(k)] = threshold_from_means(means, mode)
    return table


def cmd_enroll(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    _, gestures, report = _read_gestures(args.log, cfg, args.format)
    owner_of(gestures)  # training and calibration data must both come from one subject
    n_hold = int(len(gestures) * cfg.engine.calibration_fraction)
    train = gestures[: len(gestures) - n_hold]
    holdout = gestures[len(gestures) - n_hold:]
    template = enroll(train, cfg)
    thresholds = _calibrate(template, holdout, cfg) if holdout else {}
    template = template.with_metadata(thresholds=thresholds, calibration_gestures=len(holdout))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(template.to_json())
    print(f"enrolled {len(train)} gestures ({len(holdout)} held out for calibration); "
          f"dropped: {report.multitouch_dropped} multi-touch, {report.orphan_ups} orphan ups")
    for kind, chans in template.models.items():
        for ch, cm in chans.items():
            print(f"  {kind:5s} {ch:9s} n={cm.n_train:4d} N={cm.model.n_states} M={cm.model.n_mix}")
    for kind in template.metadata["skipped_kinds"]:
        print(f"  {kind:5s} not enrolled ({template.metadata['counts'][kind]['gestures']} gestures)")
    return 0


def _threshold(template: UserTemplate, args) -> float:
    if args.threshold is not None:
        return args.threshold
    table = template.metadata.get("thresholds", {}).get(args.threshold_mode, {})
    usable = [int(k) for k in table if int(k) <= args.k]
    if not usable:
        raise ScoringError(f"template has no calibrated {args.threshold_mode} threshold; "
                           "pass --threshold")
    k = max(usable)
    if k != args.k:
        print(f"warning: no calibration for k={args.k}, using k={k}", file=sys.stderr)
    return table[str(k)]


def cmd_score(args) -> int:
    cfg = load_config(args.config)
    template = UserTemplate.from_json(Path(args.template).read_text())
    if cfg.preprocess_hash() != template.preprocess_hash:
        raise ConfigMismatchError(
            f"template built with preprocessing {template.preprocess_hash}, config gives "
            f"{cfg.preprocess_hash()}")
    k = args.k or cfg.engine.k
    args.k = k
    threshold = _threshold(template, args)
    _, gestures, _ = _read_gestures(args.log, cfg, args.format)
    session = AuthSession(template, threshold, k)
    records = session.process(gestures)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for r in records:
            out.write(r.to_json() + "\n")
        counts = summarize(records)
        out.write(json.dumps({"summary": counts, "k": k, "threshold": threshold}) + "\n")
    finally:
        if args.out:
            out.close()
    if sum(1 for r in records if r.decision is not None) < k:
        print(f"warning: fewer scored gestures than k={k}; every verdict is undecided", file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_config(args.config).with_seed(args.seed)
    corpus = load_corpus(args.corpus, cfg, args.format)
    result = protocol_run(corpus, cfg)
    write_outputs(result, args.out, plots=not args.no_plots)
    modes = list(result.summary)
    print("k  " + "  ".join(f"{m:>8s}" for m in modes))
    for k in cfg.evaluation.k_grid:
        cells = []
        for m in modes:
            s = result.summary[m].get(k)
            cells.append(f"{100 * s[0].median:7.2f}%" if s else "     n/a")
        print(f"{k:<3d}" + "  ".join(cells))
    if result.excluded:
        print("excluded: " + ", ".join(sorted(result.excluded)))
    return 0


def cmd_synth(args) -> int:
    specs, settings = load_spec(args.spec)
    seed = args.seed if args.seed is not None else settings.get("seed", 0)
    corpus = sample_population(
        specs, int(settings.get("gestures_per_user", 150)), seed,
        rate=float(settings.get("rate_hz", 50.0)), sessions=int(settings.get("sessions", 5)),
        gap_ms=int(settings.get("gap_ms", 400)),
    )
    paths = corpus.write(args.out)
    print(f"wrote {len(paths)} user logs to {args.out} (clamp rate {corpus.clamp_rate:.4%})")
    return 0


def cmd_make_spec(args) -> int:
    specs = random_population(args.users, args.seed, separation=args.separation,
                              inertial_separation=args.inertial_separation,
                              inertial=not args.no_inertial)
    doc = spec_to_dict(specs, rate_hz=50.0, gestures_per_user=args.gestures, sessions=5, gap_ms=400)
    Path(args.out).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    print(f"wrote spec for {args.users} users to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hmmauth", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", default=None, help="JSON/YAML run config (default: built-in defaults)")
        sp.add_argument("--format", choices=("jsonl", "csv"), default="jsonl", help="log format (default: jsonl)")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    sp = sub.add_parser("enroll", help="train a template from an owner's log")
    sp.add_argument("log")
    common(sp)
    sp.add_argument("--out", required=True, help="template output path")
    sp.set_defaults(func=cmd_enroll)

    sp = sub.add_parser("score", help="stream accept/reject decisions for a log")
    sp.add_argument("template")
    sp.add_argument("log")
    common(sp, seed=False)
    sp.add_argument("--k", type=int, default=None, help="window size (default: config engine.k)")
    sp.add_argument("--threshold-mode", choices=tuple(MODE_FLAGS), default="balanced")
    sp.add_argument("--threshold", type=float, default=None, help="explicit threshold in [0, 1]")
    sp.add_argument("--out", default=None, help="decision log path (default: stdout)")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("evaluate", help="FAR/FRR/EER protocol over a multi-user corpus")
    sp.add_argument("corpus")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("synth", help="sample a synthetic corpus from a spec file")
    sp.add_argument("spec")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("make-spec", help="write a random synthetic population spec")
    sp.add_argument("--users", type=int, default=10)
    sp.add_argument("--gestures", type=int, default=150, help="gestures per user")
    sp.add_argument("--separation", type=float, default=1.0)
    sp.add_argument("--inertial-separation", type=float, default=None)
    sp.add_argument("--no-inertial", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_spec)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "threshold", None) is not None and not 0.0 <= args.threshold <= 1.0:
            raise ScoringError("--threshold must lie in [0, 1]")
        return args.func(args)
    except HmmAuthError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": "INVALID_INPUT", "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
