"""Retrieval quality metrics: average precision and mAP reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affinity import RankingList
from .dataset import GroundTruth


class EvaluationError(RuntimeError):
    """Evaluation could not produce a meaningful result."""


@dataclass
class EvalReport:
    """Per-method evaluation summary; mAP is the mean of per-query APs."""

    method: str
    map: float
    per_query_ap: dict
    skipped: list
    mean_latency_ms: float = None
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "map": self.map,
            "queries_evaluated": len(self.per_query_ap),
            "queries_skipped": len(self.skipped),
            "mean_latency_ms": self.mean_latency_ms,
            "config": self.config,
            "per_query_ap": self.per_query_ap,
            "skipped": self.skipped,
        }


def average_precision(ranking: RankingList, positives: set,
                      ignores: set = frozenset()) -> float:
    """AP of one ranking: (1/|positives|) * sum over hits of precision-at-hit.

    The query's own entry and any ignore-set ids are removed before scoring.
    Positives never retrieved still count in the denominator. Returns None
    when there are no positives (the query is skipped, not scored).
    """
    if not positives:
        return None
    drop = set(ignores) | {ranking.query_id}
    hits = 0
    ap = 0.0
    rank = 0
    for cid in ranking.ids:
        if cid in drop:
            continue
        rank += 1
        if cid in positives:
            hits += 1
            ap += hits / rank
    return ap / len(positives)


def mean_average_precision(rankings: list, truth: GroundTruth,
                           method: str = "", mean_latency_ms: float = None,
                           config: dict = None) -> EvalReport:
    """Mean of per-query APs over all scorable queries in ``rankings``.

    Queries with no positives are skipped and listed; if every query is
    skipped the evaluation is rejected.
    """
    missing = [r.query_id for r in rankings if r.query_id not in truth.positives]
    if missing:
        raise EvaluationError(
            f"{len(missing)} ranked queries missing from ground truth: "
            f"{missing[:10]}"
        )
    per_query = {}
    skipped = []
    for r in rankings:
        ap = average_precision(r, truth.positives[r.query_id],
                               truth.ignores.get(r.query_id, frozenset()))
        if ap is None:
            skipped.append(r.query_id)
        else:
            per_query[r.query_id] = ap
    if not per_query:
        raise EvaluationError(
            f"all {len(rankings)} queries skipped (no positives anywhere)"
        )
    return EvalReport(
        method=method,
        map=float(np.mean(list(per_query.values()))),
        per_query_ap=per_query,
        skipped=skipped,
        mean_latency_ms=mean_latency_ms,
        config=config or {},
    )


def render_report_table(reports: list) -> str:
    """Aligned text table over one or more method reports."""
    headers = ["method", "mAP", "queries", "skipped", "latency(ms)"]
    rows = []
    for rep in reports:
        lat = f"{rep.mean_latency_ms:.2f}" if rep.mean_latency_ms is not None else "-"
        rows.append([rep.method or "-", f"{rep.map:.4f}",
                     str(len(rep.per_query_ap)), str(len(rep.skipped)), lat])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)
