"""Command-line entry point: ``akbe <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O or
data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import pathlib
import sys

from .core import ConfigError, DataError, NumericError
from .env import ToolEnvironment
from .experiment import (
    CHECKPOINT_FILE,
    EVAL_FILE,
    SWEEP_COLUMNS,
    compare_methods,
    eval_world,
    load_config,
    load_eval_records,
    run_experiment,
    run_report,
    sweep_lambda,
    with_seed,
    write_report,
)
from .metrics import aggregate_metrics, degradation_tracking
from .policy import load_params
from .trainer import METHODS, TrainConfig, evaluate_questions

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("akbe")


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig().validate()
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    return cfg.validate()


def _out_dir(args, default: str) -> pathlib.Path:
    out = pathlib.Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


# -- subcommands -------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args).effective()
    art = run_experiment(cfg, _out_dir(args, "runs/train"), n_jobs=args.jobs, trace=args.trace, svg=args.svg)
    final = art.agent.eval_history_[-1]
    print(f"final eval step {final.step}: em={final.em:.4f} mean_tc={final.mean_tc:.4f} tp={final.tp:.4f}")
    print(f"artifacts written to {art.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    params = load_params(args.checkpoint)
    questions = eval_world(cfg)
    env = ToolEnvironment.from_world(cfg.world)
    records = evaluate_questions(params, questions, env, cfg.seed)
    if cfg.eval_mode == "expected":
        em, tc, tp = aggregate_metrics((r.p_correct, r.expected_tc) for r in records)
    else:
        em, tc, tp = aggregate_metrics((r.correct, r.tc) for r in records)
    out = _out_dir(args, "runs/eval")
    with open(out / EVAL_FILE, "w") as fh:
        for r in records:
            fh.write(json.dumps({"step": 0, **r.to_dict()}, sort_keys=True) + "\n")
    print(json.dumps({"em": em, "mean_tc": tc, "tp": "inf" if tp == float("inf") else tp}))
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    cfg = _config(args)
    seeds = [cfg.seed + i for i in range(args.n_seeds)]
    rows = sweep_lambda(cfg, _floats(args.grid), seeds=seeds, n_jobs=args.jobs,
                        on_run=lambda r: log.info("lambda %s seed %s: em=%.4f tc=%.4f",
                                                  r["lam"], r["seed"], r["final_em"], r["final_tc"]))
    out = _out_dir(args, "runs/sweep")
    with open(out / "lambda_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("inf" if r[k] == float("inf") else r[k]) for k in SWEEP_COLUMNS})
    for r in rows:
        print(f"lam={r['lam']} seed={r['seed']} em={r['final_em']:.4f} tc={r['final_tc']:.4f} tp={r['final_tp']:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    report = compare_methods(cfg, methods, args.n_seeds, n_jobs=args.jobs,
                             on_run=lambda r: log.info("%s seed %s: em=%.4f tc=%.4f", r["method"], r["seed"],
                                                       r["final_em"], r["final_tc"]))
    js, md = write_report(report, _out_dir(args, "runs/compare"))
    print(md.read_text())
    return EXIT_OK


def cmd_track_degradation(args) -> int:
    by_step = load_eval_records(pathlib.Path(args.run_dir) / EVAL_FILE)
    steps = sorted(by_step)
    early = steps[0] if args.early_step is None else args.early_step
    late = steps[-1] if args.late_step is None else args.late_step
    for s in (early, late):
        if s not in by_step:
            raise DataError(f"no eval records at step {s} (available: {steps})")
    labels, summary = degradation_tracking(by_step[early], by_step[late])
    out = _out_dir(args, args.run_dir)
    with open(out / "degradation.jsonl", "w") as fh:
        for qid in sorted(labels):
            fh.write(json.dumps({"question_id": qid, "label": labels[qid].value}) + "\n")
    print(json.dumps({"early_step": early, "late_step": late, **summary}, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    print(run_report(args.run_dir, svg=args.svg), end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML (or JSON) file mirroring TrainConfig")
    common.add_argument("--seed", type=int, help="overrides the training and world seed")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="rollout threads (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="akbe", description="Boundary-guided agentic RL on a synthetic tool world.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one run and write its artifacts")
    t.add_argument("--trace", action="store_true", help="write every training rollout as JSONL")
    t.add_argument("--svg", action="store_true", help="write static line charts of the metrics")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="greedy evaluation of a checkpoint on held-out questions")
    e.add_argument("--checkpoint", required=True, help=f"policy checkpoint (e.g. a run's {CHECKPOINT_FILE})")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-lambda", parents=[common], help="one boundary-guided run per lambda")
    s.add_argument("--grid", default="0.05,0.1,0.2,0.3,0.5,1.0", help="comma-separated lambda values")
    s.add_argument("--n-seeds", type=int, default=1)
    s.set_defaults(func=cmd_sweep_lambda)

    c = sub.add_parser("compare", parents=[common], help="multi-seed comparison of training methods")
    c.add_argument("--methods", default=",".join(METHODS), help="comma-separated subset of " + ",".join(METHODS))
    c.add_argument("--n-seeds", type=int, default=5)
    c.set_defaults(func=cmd_compare)

    d = sub.add_parser("track-degradation", parents=[common], help="label early-correct questions by their fate")
    d.add_argument("--run-dir", required=True)
    d.add_argument("--early-step", type=int)
    d.add_argument("--late-step", type=int)
    d.set_defaults(func=cmd_track_degradation)

    r = sub.add_parser("report", parents=[common], help="summarize a run directory")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--svg", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
