"""ROC-AUC per task (rank / Mann-Whitney form) and aggregation over seeds or splits."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import TaskSet


def roc_auc(scores, labels) -> float:
    """AUC via average ranks; ``nan`` when one class is absent.

    ``(sum of positive ranks - n_pos(n_pos+1)/2) / (n_pos * n_neg)``, ties
    sharing their average rank.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    pos = y == 1
    if not np.all(pos | (y == 0)):
        raise ValueError("labels must be binary (0/1)")
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(s, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class AucReport:
    per_task: dict[str, float]  # nan = undefined
    n_pos: dict[str, int]
    n_neg: dict[str, int]

    @property
    def mean_auc(self) -> float:
        vals = [v for v in self.per_task.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def to_json(self, split: str | None = None, seed: int | None = None) -> dict:
        return {
            "split": split,
            "seed": seed,
            "per_task": {k: _json_float(v) for k, v in self.per_task.items()},
            "mean_auc": _json_float(self.mean_auc),
            "n_pos": dict(self.n_pos),
            "n_neg": dict(self.n_neg),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AucReport":
        per_task = {k: (math.nan if v is None else float(v)) for k, v in obj["per_task"].items()}
        return cls(per_task, {k: int(v) for k, v in obj["n_pos"].items()}, {k: int(v) for k, v in obj["n_neg"].items()})


def _json_float(v: float):
    return None if math.isnan(v) else float(v)


def masked_auc_report(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray, tasks: TaskSet) -> AucReport:
    """Per-task AUC over rows whose label is present."""
    scores, labels, mask = (np.asarray(a) for a in (scores, labels, mask))
    if not (scores.shape == labels.shape == mask.shape) or scores.shape[1] != len(tasks):
        raise ValueError(f"shape mismatch: {scores.shape}, {labels.shape}, {mask.shape}, {len(tasks)} tasks")
    per_task, n_pos, n_neg = {}, {}, {}
    for t, name in enumerate(tasks.names):
        keep = mask[:, t] > 0
        y = labels[keep, t]
        per_task[name] = roc_auc(scores[keep, t], y)
        n_pos[name] = int(np.sum(y == 1))
        n_neg[name] = int(np.sum(y == 0))
    return AucReport(per_task, n_pos, n_neg)


@dataclass
class SeedAggregate:
    values: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        v = [x for x in self.values if not math.isnan(x)]
        return float(statistics.mean(v)) if v else math.nan

    @property
    def std(self) -> float:
        """Sample standard deviation (n-1); 0 for a single value."""
        v = [x for x in self.values if not math.isnan(x)]
        if not v:
            return math.nan
        # statistics computes exactly: identical values give 0.0
        return float(statistics.stdev(v)) if len(v) > 1 else 0.0

    def to_json(self) -> dict:
        return {"values": [_json_float(x) for x in self.values], "mean": _json_float(self.mean), "std": _json_float(self.std)}


def aggregate(values: Iterable[float]) -> SeedAggregate:
    return SeedAggregate([float(v) for v in values])


def aggregate_seeds(per_seed: Sequence[AucReport]) -> dict[str, SeedAggregate]:
    """Mean / sample std of ``mean_auc`` and every task across reports."""
    if not per_seed:
        raise ValueError("need at least one report")
    out = {"mean_auc": aggregate(r.mean_auc for r in per_seed)}
    for name in per_seed[0].per_task:
        out[name] = aggregate(r.per_task[name] for r in per_seed)
    return out
