"""Experiment orchestration: single runs with on-disk artifacts, lambda sweeps
and multi-seed method comparisons."""

from __future__ import annotations

import copy
import datetime
import hashlib
import json
import math
import pathlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import yaml

from .core import Category, ConfigError, DataError, read_jsonl, write_jsonl
from .env import generate_world, save_world
from .estimator import AKBEAgent
from .metrics import (
    degradation_tracking,
    plot_metrics_svg,
    read_metrics_csv,
    write_metrics_csv,
)
from .policy import save_params
from .trainer import METHODS, TrainConfig

EVAL_SEED_OFFSET = 10007
CATEGORY_WINDOW = 40

METRICS_FILE = "metrics.csv"
TRACE_FILE = "trajectories.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
CONFIG_FILE = "config.yaml"
EVAL_FILE = "eval_records.jsonl"
WORLD_FILE = "world.jsonl"
MANIFEST_FILE = "manifest.json"
SVG_FILE = "metrics.svg"


# -- config files --------------------------------------------------------------

def load_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return TrainConfig.from_dict(raw).validate()
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    """Copy of ``cfg`` whose training seed and world seed are both ``seed``."""
    cfg = copy.deepcopy(cfg)
    cfg.seed = int(seed)
    cfg.world.seed = int(seed)
    return cfg


# -- worlds and training ---------------------------------------------------------

def train_world(cfg: TrainConfig) -> list:
    return generate_world(cfg.world)


def eval_world(cfg: TrainConfig) -> list:
    """Held-out questions drawn from the same mixture with a disjoint seed."""
    wc = replace(cfg.world, n_questions=cfg.n_eval_questions, seed=cfg.world.seed + EVAL_SEED_OFFSET)
    return generate_world(wc, prefix="e")


def fit_agent(cfg: TrainConfig, n_jobs: int = 1, callback=None):
    """Train one agent. Returns ``(agent, train_questions, eval_questions)``."""
    cfg.validate()
    X = train_world(cfg)
    ev = eval_world(cfg)
    agent = AKBEAgent.from_config(cfg, n_jobs=n_jobs)
    agent.fit(X, eval_set=ev, callback=callback)
    return agent, X, ev


def merged_records(agent) -> list:
    """Training rows followed, per step, by the eval row of that step."""
    evals = {r.step: r for r in agent.eval_history_}
    out = []
    for r in agent.history_:
        out.append(r)
        if r.step in evals:
            out.append(evals[r.step])
    return out


def eval_rows(agent) -> list:
    rows = []
    for step, records in agent.eval_records_.items():
        for r in records:
            rows.append({"step": step, **r.to_dict()})
    return rows


# -- single run with artifacts -----------------------------------------------------

@dataclass
class RunArtifacts:
    out_dir: pathlib.Path
    metrics_csv: pathlib.Path
    checkpoint: pathlib.Path
    config_snapshot: pathlib.Path
    eval_records: pathlib.Path
    world: pathlib.Path
    manifest: pathlib.Path
    trajectories: Optional[pathlib.Path] = None
    svg: Optional[pathlib.Path] = None
    agent: Optional[AKBEAgent] = field(default=None, repr=False)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def run_experiment(cfg: TrainConfig, out_dir, n_jobs: int = 1, trace: bool = False,
                   svg: bool = False) -> RunArtifacts:
    """Train, evaluate and write every artifact of one run into ``out_dir``."""
    cfg.validate()
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = RunArtifacts(
        out_dir=out,
        metrics_csv=out / METRICS_FILE,
        checkpoint=out / CHECKPOINT_FILE,
        config_snapshot=out / CONFIG_FILE,
        eval_records=out / EVAL_FILE,
        world=out / WORLD_FILE,
        manifest=out / MANIFEST_FILE,
        trajectories=out / TRACE_FILE if trace else None,
        svg=out / SVG_FILE if svg else None,
    )
    paths.config_snapshot.write_text(dump_config(cfg))

    trace_fh = open(paths.trajectories, "w") if trace else None
    try:
        def on_step(step, result):
            for g in result.groups:
                for t in g.with_tool + g.no_tool:
                    trace_fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")

        agent, X, _ = fit_agent(cfg, n_jobs, on_step if trace else None)
    finally:
        if trace_fh is not None:
            trace_fh.close()

    save_world(paths.world, X)
    write_metrics_csv(paths.metrics_csv, merged_records(agent))
    save_params(paths.checkpoint, agent.params_)
    write_jsonl(paths.eval_records, eval_rows(agent))
    if svg:
        plot_metrics_svg(read_metrics_csv(paths.metrics_csv), paths.svg)

    files = [p for p in (paths.metrics_csv, paths.checkpoint, paths.config_snapshot, paths.eval_records,
                         paths.world, paths.trajectories, paths.svg) if p is not None]
    manifest = {
        "seed": cfg.seed,
        "method": cfg.method,
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "files": {p.name: sha256_file(p) for p in files},
    }
    paths.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    paths.agent = agent
    return paths


def verify_manifest(out_dir) -> list:
    """Names of files whose hash no longer matches the manifest."""
    out = pathlib.Path(out_dir)
    manifest = json.loads((out / MANIFEST_FILE).read_text())
    return [name for name, digest in manifest["files"].items() if sha256_file(out / name) != digest]


# -- summaries -------------------------------------------------------------------

def _mean(xs) -> float:
    xs = list(xs)
    return float(np.mean(xs)) if xs else math.nan


def tc_windows(eval_history, total_steps: int, frac: float = 0.1):
    """Mean eval TC over the first and the last ``frac`` of training steps."""
    span = max(1, int(round(frac * total_steps)))
    first = _mean(r.mean_tc for r in eval_history if r.step <= span)
    last = _mean(r.mean_tc for r in eval_history if r.step > total_steps - span)
    return first, last


def category_windows(history, window: int = CATEGORY_WINDOW):
    """Mean training category fractions over the first and last ``window`` steps."""
    early = np.mean([r.category_fractions for r in history[:window]], axis=0)
    late = np.mean([r.category_fractions for r in history[-window:]], axis=0)
    return [float(x) for x in early], [float(x) for x in late]


def degradation_between(agent, early_step=None, late_step=None):
    steps = sorted(agent.eval_records_)
    if not steps:
        raise DataError("run has no evaluation checkpoints")
    early_step = steps[0] if early_step is None else early_step
    late_step = steps[-1] if late_step is None else late_step
    for s in (early_step, late_step):
        if s not in agent.eval_records_:
            raise DataError(f"no evaluation at step {s}")

    def as_map(step):
        return {r.question_id: (r.correct, r.tc) for r in agent.eval_records_[step]}

    _, summary = degradation_tracking(as_map(early_step), as_map(late_step))
    return summary


def summarize_run(agent, cfg: TrainConfig) -> dict:
    ev = agent.eval_history_
    final = ev[-1]
    best = max(ev, key=lambda r: (r.em, -r.step))
    first_tc, last_tc = tc_windows(ev, cfg.steps)
    early_cat, late_cat = category_windows(agent.history_)
    return {
        "method": cfg.method,
        "seed": cfg.seed,
        "lam": cfg.akbe.lam,
        "final_em": final.em,
        "final_tc": final.mean_tc,
        "final_tp": final.tp,
        "best_step": best.step,
        "best_em": best.em,
        "tc_first_window": first_tc,
        "tc_last_window": last_tc,
        "early_categories": early_cat,
        "late_categories": late_cat,
        "degradation": degradation_between(agent),
        "series": [{"step": r.step, "em": r.em, "mean_tc": r.mean_tc} for r in ev],
    }


# -- lambda sweep and method comparison ---------------------------------------------

SWEEP_COLUMNS = ("lam", "seed", "final_em", "final_tc", "final_tp")


def sweep_lambda(base_cfg: TrainConfig, grid, seeds=None, n_jobs: int = 1, on_run=None) -> list:
    """One boundary-guided run per (lambda, seed); every run shares the world and seed."""
    grid = [float(x) for x in grid]
    if not grid:
        raise ConfigError("lambda grid must be nonempty")
    seeds = [base_cfg.seed] if seeds is None else list(seeds)
    rows = []
    for seed in seeds:
        for lam in grid:
            cfg = with_seed(base_cfg, seed)
            cfg.akbe.lam = lam
            if cfg.method not in ("akbe", "akbe_dpo"):
                cfg.method = "akbe"
            cfg = cfg.validate().effective()
            agent, _, _ = fit_agent(cfg, n_jobs)
            final = agent.eval_history_[-1]
            row = {"lam": lam, "seed": seed, "final_em": final.em, "final_tc": final.mean_tc,
                   "final_tp": final.tp}
            rows.append(row)
            if on_run is not None:
                on_run(row)
    return rows


def compare_methods(base_cfg: TrainConfig, methods, n_seeds: int, n_jobs: int = 1, on_run=None) -> dict:
    """Train every method on seeds ``base_cfg.seed .. base_cfg.seed + n_seeds - 1``."""
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; expected a subset of {METHODS}")
    if n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    runs = []
    for i in range(n_seeds):
        for m in methods:
            cfg = with_seed(base_cfg, base_cfg.seed + i)
            cfg.method = m
            cfg.grpo.reward_mode = "standard"
            cfg.akbe.variant = "ce"
            cfg = cfg.validate().effective()
            agent, _, _ = fit_agent(cfg, n_jobs)
            summary = summarize_run(agent, cfg)
            runs.append(summary)
            if on_run is not None:
                on_run(summary)
    return {"methods": list(methods), "n_seeds": n_seeds, "runs": runs}


def runs_by(report: dict, method: str) -> dict:
    return {r["seed"]: r for r in report["runs"] if r["method"] == method}


def render_report(report: dict) -> str:
    """Markdown rendering of a comparison report."""
    names = [c.name.lower() for c in Category]
    lines = ["# Method comparison", "", "## Final held-out metrics", "",
             "| method | seed | EM | TC | TP | best EM (step) |", "|---|---|---|---|---|---|"]
    for r in report["runs"]:
        lines.append(f"| {r['method']} | {r['seed']} | {r['final_em']:.4f} | {r['final_tc']:.4f} | "
                     f"{_fmt_tp(r['final_tp'])} | {r['best_em']:.4f} ({r['best_step']}) |")
    lines += ["", f"## Training category fractions (first vs last {CATEGORY_WINDOW} steps)", "",
              "| method | seed | window | " + " | ".join(names) + " |",
              "|---|---|---|" + "---|" * len(names)]
    for r in report["runs"]:
        for tag, fr in (("early", r["early_categories"]), ("late", r["late_categories"])):
            lines.append(f"| {r['method']} | {r['seed']} | {tag} | " + " | ".join(f"{x:.3f}" for x in fr) + " |")
    lines += ["", "## Degradation between first and last evaluation", "",
              "| method | seed | original | redundant | hallucinated | out_of_scope |", "|---|---|---|---|---|---|"]
    for r in report["runs"]:
        d = r["degradation"]
        lines.append(f"| {r['method']} | {r['seed']} | {d['original']} | {d['redundant']} | "
                     f"{d['hallucinated']} | {d['out_of_scope']} |")
    lines += ["", "## Eval TC, first vs last 10% of steps", "", "| method | seed | first | last |", "|---|---|---|---|"]
    for r in report["runs"]:
        lines.append(f"| {r['method']} | {r['seed']} | {r['tc_first_window']:.4f} | {r['tc_last_window']:.4f} |")
    dpo = [r for r in report["runs"] if r["method"] == "akbe_dpo"]
    if dpo:
        lines += ["", "## Preference-pair variant: EM / TC series", ""]
        for r in dpo:
            lines.append(f"seed {r['seed']}:")
            lines.append("")
            lines.append("| step | EM | TC |")
            lines.append("|---|---|---|")
            lines += [f"| {p['step']} | {p['em']:.4f} | {p['mean_tc']:.4f} |" for p in r["series"]]
            lines.append("")
    return "\n".join(lines).rstrip() + "\n"


def _fmt_tp(tp) -> str:
    return "inf" if math.isinf(tp) else f"{tp:.4f}"


def write_report(report: dict, out_dir) -> tuple:
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / "comparison.json"
    md = out / "comparison.md"
    js.write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    md.write_text(render_report(report))
    return js, md


def _json_default(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    raise TypeError(type(x))


# -- reading back run directories ---------------------------------------------------

def load_eval_records(path) -> dict:
    """``step -> {question_id: (correct, tc)}`` from an eval-records file."""
    by_step = {}
    for row in read_jsonl(path):
        try:
            by_step.setdefault(int(row["step"]), {})[row["question_id"]] = (int(row["correct"]), int(row["tc"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}: malformed eval record: {exc}") from exc
    if not by_step:
        raise DataError(f"{path}: no eval records")
    return by_step


def run_report(run_dir, svg: bool = False) -> str:
    """Markdown summary of one run directory (final and best checkpoint)."""
    run = pathlib.Path(run_dir)
    records = read_metrics_csv(run / METRICS_FILE)
    evals = [r for r in records if r.phase == "eval"]
    train = [r for r in records if r.phase == "train"]
    if not evals:
        raise DataError(f"{run / METRICS_FILE}: no eval rows")
    final, best = evals[-1], max(evals, key=lambda r: (r.em, -r.step))
    lines = [f"# Run report: {run}", "",
             f"- training steps: {len(train)}",
             f"- final eval (step {final.step}): EM {final.em:.4f}, TC {final.mean_tc:.4f}, TP {_fmt_tp(final.tp)}",
             f"- best eval EM: {best.em:.4f} at step {best.step}",
             f"- total training cost units: {sum(r.cost_units for r in train):.1f}"]
    if train:
        early, late = category_windows(train)
        names = [c.name.lower() for c in Category]
        lines.append("- early categories: " + ", ".join(f"{n} {x:.3f}" for n, x in zip(names, early)))
        lines.append("- late categories: " + ", ".join(f"{n} {x:.3f}" for n, x in zip(names, late)))
    if (run / EVAL_FILE).exists():
        by_step = load_eval_records(run / EVAL_FILE)
        steps = sorted(by_step)
        _, summary = degradation_tracking(by_step[steps[0]], by_step[steps[-1]])
        lines.append(f"- degradation step {steps[0]} -> {steps[-1]}: "
                     + ", ".join(f"{k} {v}" for k, v in summary.items()))
    if svg:
        plot_metrics_svg(records, run / SVG_FILE)
        lines.append(f"- chart: {SVG_FILE}")
    text = "\n".join(lines) + "\n"
    (run / "report.md").write_text(text)
    return text


__all__ = [
    "RunArtifacts",
    "compare_methods",
    "dump_config",
    "eval_world",
    "fit_agent",
    "load_config",
    "load_eval_records",
    "merged_records",
    "render_report",
    "run_experiment",
    "run_report",
    "summarize_run",
    "sweep_lambda",
    "train_world",
    "verify_manifest",
    "with_seed",
    "write_report",
]
