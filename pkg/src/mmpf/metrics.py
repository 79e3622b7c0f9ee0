"""Per-group evaluation metrics and table-style aggregates.

Calibration bins are ``((m-1)/M, m/M]``; a confidence of exactly 0 goes to
the first bin. Predicted classes use argmax with ties broken toward the
lowest class index.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

METRICS = ("acc", "bs", "ce", "ece", "mce")
HIGHER_IS_BETTER = {"acc"}


class MissingGroupError(ValueError):
    pass


class InfiniteLossError(ArithmeticError):
    def __init__(self, index: int):
        super().__init__(f"cross entropy is infinite: sample {index} assigns zero probability to its label")
        self.index = index


def per_sample_loss(probs, labels, loss: str) -> np.ndarray:
    """Brier score ``||onehot(y) - p||^2`` or cross entropy ``-log p_y`` per row."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    rows = np.arange(labels.size)
    if loss == "bs":
        sq = (probs ** 2).sum(axis=1)
        return sq - 2.0 * probs[rows, labels] + 1.0
    if loss == "ce":
        with np.errstate(divide="ignore"):
            return -np.log(probs[rows, labels])
    raise ValueError(f"unknown loss {loss!r}")


@dataclass
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    n_groups: int | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        if self.probs.ndim != 2:
            raise ValueError("probs must be a 2-d array")
        n = self.probs.shape[0]
        if self.labels.shape != (n,) or self.groups.shape != (n,):
            raise ValueError("probs, labels and groups must have the same length")
        if np.any(self.probs < 0) or not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("rows of probs must be probability vectors")
        if self.n_groups is None:
            self.n_groups = int(self.groups.max()) + 1 if n else 0

    def predicted(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)


@dataclass
class GroupReport:
    metric: str
    per_group: np.ndarray
    counts: np.ndarray

    @property
    def sample_mean(self) -> float:
        return float(self.counts @ self.per_group / self.counts.sum())

    @property
    def group_mean(self) -> float:
        return float(self.per_group.mean())

    @property
    def worst(self) -> float:
        return float(self.per_group.min() if self.metric in HIGHER_IS_BETTER else self.per_group.max())

    @property
    def best(self) -> float:
        return float(self.per_group.max() if self.metric in HIGHER_IS_BETTER else self.per_group.min())

    @property
    def worst_group(self) -> int:
        return int(np.argmin(self.per_group) if self.metric in HIGHER_IS_BETTER else np.argmax(self.per_group))

    @property
    def disparity(self) -> float:
        return float(self.per_group.max() - self.per_group.min())

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "per_group": self.per_group.tolist(),
            "counts": self.counts.tolist(),
            "sample_mean": self.sample_mean,
            "group_mean": self.group_mean,
            "worst": self.worst,
            "disparity": self.disparity,
        }

    def row(self) -> dict:
        out = {f"group_{a}": float(v) for a, v in enumerate(self.per_group)}
        out.update(sample_mean=self.sample_mean, group_mean=self.group_mean, worst=self.worst,
                   disparity=self.disparity)
        return out


def calibration_bins(confidence, n_bins: int) -> np.ndarray:
    """Bin index ``m - 1`` for bins ``((m-1)/M, m/M]``; zero confidence joins the first bin."""
    idx = np.ceil(np.asarray(confidence) * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def _calibration(correct, conf, n_bins):
    b = calibration_bins(conf, n_bins)
    gap = np.bincount(b, weights=correct - conf, minlength=n_bins)
    size = np.bincount(b, minlength=n_bins)
    ece = np.abs(gap).sum() / correct.size
    used = size > 0
    mce = float(np.max(np.abs(gap[used]) / size[used]))
    return float(ece), mce


def _metric_values(preds: PredictionSet, idx: np.ndarray, metric: str, n_bins: int) -> float:
    p = preds.probs[idx]
    y = preds.labels[idx]
    if metric == "acc":
        return float(np.mean(np.argmax(p, axis=1) == y))
    if metric in ("bs", "ce"):
        losses = per_sample_loss(p, y, metric)
        bad = np.flatnonzero(~np.isfinite(losses))
        if bad.size:
            raise InfiniteLossError(int(idx[bad[0]]))
        return float(losses.mean())
    correct = (np.argmax(p, axis=1) == y).astype(float)
    ece, mce = _calibration(correct, p.max(axis=1), n_bins)
    return ece if metric == "ece" else mce


def evaluate(preds: PredictionSet, metric: str, n_bins: int = 10) -> GroupReport:
    """Per-group values of ``metric`` with table aggregates."""
    metric = metric.lower()
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    counts = np.bincount(preds.groups, minlength=preds.n_groups)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise MissingGroupError(f"groups {missing.tolist()} have no samples")
    values = np.array([_metric_values(preds, np.flatnonzero(preds.groups == a), metric, n_bins)
                       for a in range(preds.n_groups)])
    return GroupReport(metric, values, counts)


def evaluate_all(preds: PredictionSet, metrics: Sequence[str] = METRICS, n_bins: int = 10) -> dict:
    return {m: evaluate(preds, m, n_bins) for m in metrics}


def aggregate_splits(reports: Sequence[GroupReport]) -> dict:
    """Mean and standard deviation across splits; disparity and worst are taken per split first."""
    if not reports:
        raise ValueError("need at least one report")
    keys = ("sample_mean", "group_mean", "worst", "disparity")
    out = {"metric": reports[0].metric, "n_splits": len(reports)}
    for k in keys:
        vals = np.array([getattr(r, k) for r in reports])
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    per_group = np.stack([r.per_group for r in reports])
    out["per_group"] = {"mean": per_group.mean(axis=0).tolist(),
                        "std": (per_group.std(axis=0, ddof=1) if len(reports) > 1
                                else np.zeros(per_group.shape[1])).tolist()}
    return out


def write_reports_json(reports: dict, path) -> None:
    Path(path).write_text(json.dumps({k: r.to_json() for k, r in reports.items()}, indent=2))


def write_reports_csv(rows: Sequence[tuple[str, GroupReport]], path) -> None:
    """One row per (label, report): group columns followed by the four aggregates."""
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to write")
    n = max(r.per_group.size for _, r in rows)
    header = ["model", "metric", *[f"group_{a}" for a in range(n)], "sample_mean", "group_mean", "worst", "disparity"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for label, r in rows:
            d = r.row()
            w.writerow([label, r.metric, *[d.get(f"group_{a}", "") for a in range(n)],
                        d["sample_mean"], d["group_mean"], d["worst"], d["disparity"]])
