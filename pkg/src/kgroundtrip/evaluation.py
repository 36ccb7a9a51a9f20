"""Ranking metrics, graph-recovery scores and the two-run loss comparison."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List

import numpy as np
from scipy.stats import rankdata

from .kg import KnowledgeGraph, edge_set

if TYPE_CHECKING:
    from .extract import RecoveredGraph
    from .gct import RoundTripReport

REPORT_HEADER = ["steps", "auc_pr", "auc_roc", "loss"]


class MetricError(ValueError):
    pass


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC-ROC needs both classes")
    ranks = rankdata(s)  # average ranks, so halves are exact in float
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision over a descending-score ranking (stable on ties).

    The precisions are summed with fsum, so the result does not depend on
    summation order.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUC-PR needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, y.size + 1)
    return math.fsum(precision[hits].tolist()) / n_pos


@dataclass
class RecoveryScore:
    edge_precision: float
    edge_recall: float
    edge_f1: float
    relation_accuracy: float
    n_true: int
    n_recovered: int
    n_intersection: int

    def as_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def score_recovery(truth: KnowledgeGraph, recovered: "RecoveredGraph", match_floor: float = 0.0) -> RecoveryScore:
    true_pairs = edge_set(truth)
    kept = {k: t for k, t in recovered.best.items() if t.match >= match_floor}
    hit = set(kept) & true_pairs
    p = len(hit) / len(kept) if kept else 0.0
    r = len(hit) / len(true_pairs) if true_pairs else 0.0
    rel_ok = sum(kept[k].relation in truth.relations_between(*k) for k in hit)
    acc = rel_ok / len(hit) if hit else 0.0
    return RecoveryScore(p, r, _f1(p, r), acc, len(true_pairs), len(kept), len(hit))


def compare_runs(modified: "RoundTripReport", original: "RoundTripReport") -> Dict[str, object]:
    """Summarise the KL-only run against the full-loss run on a shared step grid."""
    steps_m = [row.step for row in modified.rows]
    steps_o = [row.step for row in original.rows]
    if steps_m != steps_o:
        raise MetricError(f"step grids differ: {steps_m} vs {steps_o}")
    if not steps_m:
        raise MetricError("reports have no rows")
    lm = np.array([row.loss for row in modified.rows])
    lo = np.array([row.loss for row in original.rows])
    roc_m = np.mean([row.auc_roc for row in modified.rows])
    roc_o = np.mean([row.auc_roc for row in original.rows])
    pr_m = np.mean([row.auc_pr for row in modified.rows])
    pr_o = np.mean([row.auc_pr for row in original.rows])
    mean_m, mean_o = float(lm.mean()), float(lo.mean())
    ratio = mean_m / mean_o if mean_o != 0 else float("inf")
    return {
        "steps": steps_m,
        "loss_ratio_per_step": (lm / lo).tolist(),
        "mean_loss_modified": mean_m,
        "mean_loss_original": mean_o,
        "mean_loss_ratio": ratio,
        "mean_auc_roc_modified": float(roc_m),
        "mean_auc_roc_original": float(roc_o),
        "mean_auc_pr_modified": float(pr_m),
        "mean_auc_pr_original": float(pr_o),
        "delta_auc_roc": float(roc_m - roc_o),
        "delta_auc_pr": float(pr_m - pr_o),
        "finding_loss_below_10pct": bool(mean_m < 0.10 * mean_o),
        "finding_auc_roc_dropped": bool(roc_m < roc_o),
    }


def write_summary(summary: Dict[str, object], path) -> None:
    lines = []
    for k, v in summary.items():
        if isinstance(v, list):
            v = " ".join(repr(x) for x in v)
        lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_csv(report: "RoundTripReport", path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for row in report.rows:
            w.writerow([row.step, repr(row.auc_pr), repr(row.auc_roc), repr(row.loss)])


def read_report_csv(path) -> "RoundTripReport":
    from .gct import ReportRow, RoundTripReport

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != REPORT_HEADER:
            raise MetricError(f"{path}: expected header {REPORT_HEADER}, got {header}")
        rows: List[ReportRow] = [ReportRow(int(r[0]), float(r[1]), float(r[2]), float(r[3]))
                                 for r in reader if r]
    return RoundTripReport(rows=rows)


def format_table(report: "RoundTripReport") -> str:
    out = [f"{'Steps':>6} {'AUC-PR':>8} {'AUC-ROC':>8} {'loss':>8}"]
    for r in report.rows:
        out.append(f"{r.step:>6} {r.auc_pr:>8.3f} {r.auc_roc:>8.3f} {r.loss:>8.3f}")
    return "\n".join(out)
