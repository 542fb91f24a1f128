"""The six standard label-distribution measures and their aggregation."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

# name -> True when larger is better
DIRECTIONS = {
    "chebyshev": False,
    "clark": False,
    "canberra": False,
    "kl": False,
    "cosine": True,
    "intersection": True,
}
METRIC_NAMES = tuple(DIRECTIONS)


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    return p, q


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 terms contribute nothing
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def chebyshev(p, q) -> float:
    p, q = _pair(p, q)
    return np.max(np.abs(p - q), axis=-1)


def clark(p, q) -> float:
    p, q = _pair(p, q)
    d = p - q
    return np.sqrt(np.sum(_safe_ratio(d * d, (p + q) ** 2), axis=-1))


def canberra(p, q) -> float:
    p, q = _pair(p, q)
    return np.sum(_safe_ratio(np.abs(p - q), p + q), axis=-1)


def kl_divergence(p, q) -> float:
    """sum p ln(p/q), with 0 ln(0/q) taken as 0."""
    p, q = _pair(p, q)
    mask = p > 0
    if np.any(mask & (q <= 0)):
        raise ContractError("KL divergence undefined: q has zero mass where p is positive")
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * np.log(p[mask] / q[mask])
    return np.sum(terms, axis=-1)


def cosine(p, q) -> float:
    p, q = _pair(p, q)
    return np.sum(p * q, axis=-1) / (np.linalg.norm(p, axis=-1) * np.linalg.norm(q, axis=-1))


def intersection(p, q) -> float:
    p, q = _pair(p, q)
    return np.sum(np.minimum(p, q), axis=-1)


METRICS = {
    "chebyshev": chebyshev,
    "clark": clark,
    "canberra": canberra,
    "kl": kl_divergence,
    "cosine": cosine,
    "intersection": intersection,
}


def _check_rows(x: np.ndarray, what: str, atol: float = 1e-6) -> None:
    bad = ~np.isfinite(x).all(axis=1) | (x < 0).any(axis=1) | (np.abs(x.sum(axis=1) - 1.0) > atol)
    if bad.any():
        i = int(np.argmax(bad))
        raise ContractError(f"{what} row {i} is not a valid distribution")


def score_predictions(pred, target) -> dict[str, float]:
    """Average each metric over paired rows of ``pred`` and ``target``."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {target.shape}")
    _check_rows(pred, "prediction")
    _check_rows(target, "target")
    row = {}
    for name, fn in METRICS.items():
        # reference direction: metric(target, pred)
        values = np.asarray(fn(target, pred), dtype=np.float64)
        row[name] = float(np.mean(values))
    return row


@dataclass
class MetricSummary:
    name: str
    higher_is_better: bool
    mean: float
    std: float
    values: list[float] = field(default_factory=list)

    @property
    def direction(self) -> str:
        return "up" if self.higher_is_better else "down"


@dataclass
class MetricsReport:
    """Per-metric mean and population std over a list of evaluation rows."""

    metrics: dict[str, MetricSummary]
    noise_draws: int = 0
    fold_keys: list[tuple] = field(default_factory=list)

    @classmethod
    def aggregate(cls, rows: list[dict[str, float]], noise_draws: int = 0) -> "MetricsReport":
        if not rows:
            raise ContractError("cannot aggregate an empty list of metric rows")
        metrics = {}
        for name in METRIC_NAMES:
            vals = [float(r[name]) for r in rows]
            arr = np.asarray(vals)
            metrics[name] = MetricSummary(name, DIRECTIONS[name], float(arr.mean()),
                                          float(arr.std()), vals)
        return cls(metrics, noise_draws)

    def __getitem__(self, name: str) -> MetricSummary:
        return self.metrics[name]

    def means(self) -> dict[str, float]:
        return {k: m.mean for k, m in self.metrics.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "direction", "mean", "std", "n"])
        for m in self.metrics.values():
            w.writerow([m.name, m.direction, repr(m.mean), repr(m.std), len(m.values)])
        return buf.getvalue()

    def folds_csv(self, header=("repeat", "fold")) -> str:
        labels = self.fold_keys or None
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(header) + list(METRIC_NAMES))
        n = len(next(iter(self.metrics.values())).values)
        for i in range(n):
            key = list(labels[i]) if labels is not None else [i]
            w.writerow(key + [repr(self.metrics[m].values[i]) for m in METRIC_NAMES])
        return buf.getvalue()

    def format(self) -> str:
        return "\n".join(f"{m.name:>12} {m.mean:.4f}±{m.std:.4f}" for m in self.metrics.values())
