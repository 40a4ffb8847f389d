"""Evaluation metrics, category tracking, degradation labels and cost accounting."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .core import Category, ConfigError, DataError

CSV_COLUMNS = (
    "step", "em", "mean_tc", "tp",
    "frac_tool_dependent", "frac_efficiency", "frac_hallucination", "frac_both_wrong",
    "mean_reward", "signal_count", "cost_units", "loss_grpo", "loss_akbe", "loss_total",
)
# trailing column separating training rows from held-out evaluation rows
PHASE_COLUMN = "phase"

INF = math.inf


@dataclass
class MetricsRecord:
    step: int
    em: float
    mean_tc: float
    tp: float
    category_fractions: tuple = (0.0, 0.0, 0.0, 1.0)
    mean_reward: float = 0.0
    signal_count: int = 0
    cost_units: float = 0.0
    loss_grpo: float = 0.0
    loss_akbe: float = 0.0
    loss_total: float = 0.0
    phase: str = "train"

    def row(self) -> list:
        vals = [self.step, self.em, self.mean_tc, self.tp, *self.category_fractions,
                self.mean_reward, self.signal_count, self.cost_units,
                self.loss_grpo, self.loss_akbe, self.loss_total]
        return [_fmt(v) for v in vals] + [self.phase]

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        return cls(
            step=int(row["step"]),
            em=float(row["em"]),
            mean_tc=float(row["mean_tc"]),
            tp=float(row["tp"]),
            category_fractions=tuple(float(row[c]) for c in CSV_COLUMNS[4:8]),
            mean_reward=float(row["mean_reward"]),
            signal_count=int(row["signal_count"]),
            cost_units=float(row["cost_units"]),
            loss_grpo=float(row["loss_grpo"]),
            loss_akbe=float(row["loss_akbe"]),
            loss_total=float(row["loss_total"]),
            phase=row.get(PHASE_COLUMN, "train"),
        )


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf"
    return repr(v)


def write_metrics_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_COLUMNS) + [PHASE_COLUMN])
        for r in records:
            w.writerow(r.row())


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        return [MetricsRecord.from_row(r) for r in reader]


def aggregate_metrics(evals):
    """``(em, mean_tc, tp)`` over ``(correct, tc)`` pairs.

    ``correct`` may be a probability (expected correctness), in which case
    ``em`` and ``tp`` are expectations too. ``tp`` is ``inf`` when no tool
    was called at all.
    """
    evals = list(evals)
    if not evals:
        raise ConfigError("aggregate_metrics needs at least one evaluation")
    correct = np.array([float(c) for c, _ in evals])
    tc = np.array([float(t) for _, t in evals])
    total_tc = tc.sum()
    tp = correct.sum() / total_tc if total_tc > 0 else INF
    return float(correct.mean()), float(tc.mean()), float(tp)


def category_distribution(outcomes) -> tuple:
    outcomes = list(outcomes)
    if not outcomes:
        raise ConfigError("category_distribution needs at least one outcome")
    counts = np.zeros(len(Category))
    for o in outcomes:
        cat = o.category if hasattr(o, "category") else o
        counts[int(cat)] += 1
    return tuple(float(c) for c in counts / len(outcomes))


def nt_confidence_histogram(groups, G_nt=None) -> np.ndarray:
    """Counts of correct no-tool rollouts for questions with at least one.

    Index ``k - 1`` holds the number of questions with exactly ``k``
    rewarded no-tool rollouts.
    """
    groups = list(groups)
    if G_nt is None:
        G_nt = max((len(g.no_tool) for g in groups), default=0)
    hist = np.zeros(G_nt, dtype=int)
    for g in groups:
        k = sum(1 for t in g.no_tool if t.reward == 1)
        if k:
            hist[k - 1] += 1
    return hist


class DegradationLabel(str, enum.Enum):
    ORIGINAL = "original"
    REDUNDANT = "redundant"
    HALLUCINATED = "hallucinated"
    OUT_OF_SCOPE = "out_of_scope"


def degradation_tracking(early: dict, late: dict):
    """Label each question by how an early-correct answer fared later.

    Maps are ``question_id -> (correct, tc)``. Returns ``(labels, summary)``.
    """
    missing = sorted(set(early) ^ set(late))
    if missing:
        raise DataError(f"question {missing[0]} missing from one checkpoint")
    labels = {}
    for qid, (c0, tc0) in early.items():
        c1, tc1 = late[qid]
        if not c0:
            labels[qid] = DegradationLabel.OUT_OF_SCOPE
        elif not c1:
            labels[qid] = DegradationLabel.HALLUCINATED
        elif tc1 > tc0:
            labels[qid] = DegradationLabel.REDUNDANT
        else:
            labels[qid] = DegradationLabel.ORIGINAL
    summary = {lab.value: 0 for lab in DegradationLabel}
    for lab in labels.values():
        summary[lab.value] += 1
    return labels, summary


def cost_accounting(trajs, cost_per_tool: float, cost_per_step: float) -> float:
    if cost_per_tool < 0 or cost_per_step < 0:
        raise ConfigError("costs must be >= 0")
    return float(sum(len(t.steps) * cost_per_step + t.tc * cost_per_tool for t in trajs))


def plot_metrics_svg(records, out_path, columns=("em", "mean_tc", "tp")) -> None:
    """Static line charts of training and eval series."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(columns), figsize=(4 * len(columns), 3))
    for ax, col in zip(np.atleast_1d(axes), columns):
        for phase in ("train", "eval"):
            rs = [r for r in records if r.phase == phase and math.isfinite(getattr(r, col))]
            if rs:
                ax.plot([r.step for r in rs], [getattr(r, col) for r in rs], label=phase)
        ax.set_title(col)
        ax.set_xlabel("step")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
