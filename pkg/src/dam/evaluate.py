"""Pos/Neg/Macro F1, distance-bucketed scores and the ablation matrix."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from dam.data import ECECInstance


@dataclass
class MetricsReport:
    pos_f1: float
    neg_f1: float
    macro_f1: float
    count: int = 0
    by_distance: dict[str, float] = field(default_factory=dict)
    distance_counts: dict[str, int] = field(default_factory=dict)

    def as_percent(self) -> dict[str, float]:
        return {k: round(100 * getattr(self, k), 2) for k in ("pos_f1", "neg_f1", "macro_f1")}

    def to_record(self, **extra) -> str:
        """One JSON line; floats use repr so identical runs give identical bytes."""
        return json.dumps({**extra, **asdict(self)}, sort_keys=True) + "\n"


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def compute_f1(predictions: Sequence[int], golds: Sequence[int]) -> MetricsReport:
    """F1 of the positive class, of the negative class, and their mean.

    A zero denominator yields F1 = 0.
    """
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions vs {len(golds)} gold labels")
    if not golds:
        raise ValueError("cannot score an empty prediction set")
    tp = fp = fn = tn = 0
    for p, g in zip(predictions, golds):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif g == 1:
            fn += 1
        else:
            tn += 1
    pos = _f1(tp, fp, fn)
    neg = _f1(tn, fn, fp)
    return MetricsReport(pos, neg, (pos + neg) / 2, count=len(golds))


def macro_from_percent(pos_f1: float, neg_f1: float) -> float:
    return round((pos_f1 + neg_f1) / 2, 2)


def bucket_of(distance: int, buckets: Sequence[str]) -> Optional[str]:
    """Bucket label of a distance; labels are exact values (``"2"``) or open-ended (``"4+"``)."""
    for label in buckets:
        if label.endswith("+"):
            if distance >= int(label[:-1]):
                return label
        elif distance == int(label):
            return label
    return None


def distance_report(
    predictions: Sequence[int],
    golds: Sequence[int],
    instances: Sequence[ECECInstance],
    buckets: Sequence[str] = ("0", "1", "2", "3", "4+"),
) -> tuple[dict[str, float], dict[str, int]]:
    """Positive-class F1 per distance bucket ``t - i``; empty buckets are left out."""
    grouped: dict[str, tuple[list[int], list[int]]] = {}
    for p, g, inst in zip(predictions, golds, instances):
        label = bucket_of(inst.target_index - inst.candidate_index, buckets)
        if label is None:
            continue
        ps, gs = grouped.setdefault(label, ([], []))
        ps.append(p)
        gs.append(g)
    scores, counts = {}, {}
    for label in buckets:
        if label in grouped:
            ps, gs = grouped[label]
            scores[label] = compute_f1(ps, gs).pos_f1
            counts[label] = len(gs)
    return scores, counts


def full_report(predictions, golds, instances, buckets=("0", "1", "2", "3", "4+")) -> MetricsReport:
    report = compute_f1(predictions, golds)
    report.by_distance, report.distance_counts = distance_report(predictions, golds, instances, buckets)
    return report


def format_table(rows: dict[str, MetricsReport]) -> str:
    lines = [f"{'Model':<16}{'Pos.F1':>8}{'Neg.F1':>8}{'MacroF1':>9}"]
    for name, r in rows.items():
        pct = r.as_percent()
        lines.append(f"{name:<16}{pct['pos_f1']:>8.2f}{pct['neg_f1']:>8.2f}{pct['macro_f1']:>9.2f}")
    return "\n".join(lines) + "\n"


def run_matrix(base_config, variants: Sequence[str], data, run_dir=None, split: str = "test") -> dict[str, MetricsReport]:
    """Train and score each named row of the ablation / fusion matrix.

    ``split`` selects the scored split; it falls back to validation when the
    data carries no test split.
    """
    from dam.config import matrix_config
    from dam.trainer import evaluate_split, train

    configs = {name: matrix_config(base_config, name) for name in variants}
    rows = {}
    for name, cfg in configs.items():
        cell_dir = Path(run_dir) / name if run_dir is not None else None
        result = train(cfg, data, cell_dir)
        target = data.test if split == "test" and data.test is not None else data.validation
        rows[name] = evaluate_split(result.model, result.edge_parser, target)[0]
    return rows
