"""Ranking metrics for binary risk scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import NoPositives, SingleClass


def _prep(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y


def auroc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted one half."""
    s, y = _prep(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks resolve ties as 1/2
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over positives ranked by descending score.

    Equal scores keep their input order (stable sort), so the estimator is
    a deterministic function of the input sequence.
    """
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


@dataclass
class MetricsReport:
    stratum: str
    n: int
    positives: int
    auroc: float = math.nan
    auprc: float = math.nan
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def positive_fraction(self) -> float:
        return self.positives / self.n if self.n else math.nan


def evaluate_scores(scores, labels, stratum: str = "all") -> MetricsReport:
    s, y = _prep(scores, labels)
    rep = MetricsReport(stratum, len(y), int(y.sum()))
    try:
        rep.auroc = auroc(s, y)
        rep.auprc = auprc(s, y)
    except (SingleClass, NoPositives) as exc:
        rep.error = f"{type(exc).__name__}: {exc}"
    return rep
