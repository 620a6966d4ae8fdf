import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from apps.learner.types import RunRecord
from apps.stream.generators import StreamConfig

logger = logging.getLogger(__name__)


def precision_recall(record: RunRecord) -> tuple[float, float]:
    """
    Switch-detection precision and recall, ignoring step 0.

    Step 0 is a switch for every learner and carries no information. A ratio
    with a zero denominator is reported as NaN with a warning.
    """
    outcomes = record.outcomes[1:]
    tp = sum(o.detected_switch and o.truth_switched for o in outcomes)
    fp = sum(o.detected_switch and not o.truth_switched for o in outcomes)
    fn = sum(o.truth_switched and not o.detected_switch for o in outcomes)

    if tp + fp == 0:
        logger.warning("No detected switches after step 0; precision is undefined")
        precision = math.nan
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        logger.warning("No true switches after step 0; recall is undefined")
        recall = math.nan
    else:
        recall = tp / (tp + fn)
    return precision, recall


def _mean_accuracy(record: RunRecord, domain_ids: set[int]) -> float:
    values = [o.query_accuracy for o in record.outcomes if o.truth_domain_id in domain_ids]
    return float(np.mean(values)) if values else math.nan


def accuracy_keys(scfg: StreamConfig) -> list[str]:
    return ["overall_acc", "pretrain_acc"] + [
        f"ood{i}_acc" for i in range(1, len(scfg.shifted_domains) + 1)
    ]


def seed_metrics(record: RunRecord, scfg: StreamConfig) -> dict[str, float]:
    """Per-run metrics; shifted domains are numbered ood1, ood2, ... in config order."""
    precision, recall = precision_recall(record)
    metrics = {
        "overall_acc": float(np.mean([o.query_accuracy for o in record.outcomes])),
        "pretrain_acc": _mean_accuracy(record, {d.domain_id for d in scfg.pretrain_domains}),
    }
    for i, domain in enumerate(scfg.shifted_domains, start=1):
        metrics[f"ood{i}_acc"] = _mean_accuracy(record, {domain.domain_id})
    metrics["precision"] = precision
    metrics["recall"] = recall
    metrics["detected_ood"] = float(sum(o.detected_ood for o in record.outcomes))
    return metrics


def summary_columns(scfg: StreamConfig) -> list[str]:
    columns = ["mode", "seed_count"]
    for key in [*accuracy_keys(scfg), "precision", "recall"]:
        columns += [f"{key}_mean", f"{key}_std"]
    columns.append("detected_ood_mean")
    return columns


@dataclass
class MetricsSummary:
    columns: list[str]
    rows: list[dict] = field(default_factory=list)

    def row(self, mode: str) -> dict:
        for row in self.rows:
            if row["mode"] == mode:
                return row
        raise KeyError(mode)


def summarize(
    per_mode: Mapping[str, Sequence[Mapping[str, float]]], scfg: StreamConfig
) -> MetricsSummary:
    """Mean and population std over seeds for every metric of every mode."""
    summary = MetricsSummary(columns=summary_columns(scfg))
    for mode, seeds in per_mode.items():
        row = {"mode": mode, "seed_count": len(seeds)}
        for key in [*accuracy_keys(scfg), "precision", "recall"]:
            values = np.array([metrics[key] for metrics in seeds], dtype=np.float64)
            row[f"{key}_mean"] = float(np.mean(values))
            row[f"{key}_std"] = float(np.std(values))
        row["detected_ood_mean"] = float(np.mean([m["detected_ood"] for m in seeds]))
        summary.rows.append(row)
    return summary
