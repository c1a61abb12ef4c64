"""Disaggregation metrics on watt-scale series."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

ON_THRESHOLD = 15.0


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"pred length {pred.size} != truth length {truth.size}")
    if pred.size == 0:
        raise ValueError("empty series")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def sae(pred, truth) -> float | None:
    """Relative error of total energy, ``|sum(pred) - sum(truth)| / sum(truth)``.

    Returns ``None`` when the true total is zero.
    """
    pred, truth = _pair(pred, truth)
    r = truth.sum()
    if r == 0:
        return None
    return float(abs(pred.sum() - r) / r)


@dataclass(frozen=True)
class OnOffScore:
    precision: float
    recall: float
    f1: float
    no_positives: bool = False


def f1(pred, truth, threshold: float = ON_THRESHOLD) -> OnOffScore:
    """Per-timestep ON/OFF classification score; ON means strictly above ``threshold``."""
    pred, truth = _pair(pred, truth)
    p_on = pred > threshold
    t_on = truth > threshold
    tp = int(np.sum(p_on & t_on))
    fp = int(np.sum(p_on & ~t_on))
    fn = int(np.sum(~p_on & t_on))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    score = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return OnOffScore(precision, recall, score, no_positives=(tp + fp + fn) == 0)


@dataclass(frozen=True)
class ApplianceMetrics:
    name: str
    mae: float
    sae: float | None
    precision: float
    recall: float
    f1: float
    threshold: float


@dataclass(frozen=True)
class MetricsReport:
    appliances: tuple[ApplianceMetrics, ...]

    @property
    def mean_mae(self) -> float:
        return float(np.mean([a.mae for a in self.appliances]))

    @property
    def mean_sae(self) -> float | None:
        vals = [a.sae for a in self.appliances if a.sae is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_f1(self) -> float:
        return float(np.mean([a.f1 for a in self.appliances]))

    def __getitem__(self, name: str) -> ApplianceMetrics:
        for a in self.appliances:
            if a.name == name:
                return a
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"appliances": [asdict(a) for a in self.appliances]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'appliance':<12} {'MAE[W]':>10} {'SAE':>8} {'P':>6} {'R':>6} {'F1':>6}"]
        for a in self.appliances:
            s = "n/a" if a.sae is None else f"{a.sae:.4f}"
            lines.append(
                f"{a.name:<12} {a.mae:>10.3f} {s:>8} {a.precision:>6.3f} {a.recall:>6.3f} {a.f1:>6.3f}"
            )
        return "\n".join(lines)


def evaluate(pred_watts, truth_watts, names=None, thresholds=ON_THRESHOLD) -> MetricsReport:
    """Metrics for ``(T, n_tasks)`` arrays of watt predictions and ground truth."""
    pred_watts = np.atleast_2d(np.asarray(pred_watts, dtype=np.float64).T).T
    truth_watts = np.atleast_2d(np.asarray(truth_watts, dtype=np.float64).T).T
    n = pred_watts.shape[1]
    names = [f"task{j}" for j in range(n)] if names is None else list(names)
    if np.isscalar(thresholds):
        thresholds = [float(thresholds)] * n
    rows = []
    for j in range(n):
        p, t = pred_watts[:, j], truth_watts[:, j]
        score = f1(p, t, thresholds[j])
        rows.append(
            ApplianceMetrics(names[j], mae(p, t), sae(p, t), score.precision, score.recall, score.f1, thresholds[j])
        )
    return MetricsReport(tuple(rows))


def evaluate_model(params, batch, names=None, thresholds=ON_THRESHOLD, clip=True) -> MetricsReport:
    """Run a model over a labeled :class:`~nilmfed.data.WindowBatch` and score it in watts.

    Negative power predictions are clipped to zero unless ``clip`` is False.
    """
    from .model import forward

    pred = batch.normalizer.targets_to_watts(forward(params, batch.windows))
    if clip:
        pred = np.clip(pred, 0.0, None)
    return evaluate(pred, batch.targets_watts(), names, thresholds)
