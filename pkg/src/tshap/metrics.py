"""Explanation quality metrics: temporal variance, perturbation faithfulness,
per-joint magnitude, latency and fold-level paired comparison."""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attribution import AttributionMap, gradient_saliency, grad_cam, shapley_full
from .data import FeatureSequence, N_COORDS, N_JOINTS, to_binary_label
from .errors import (
    DegenerateBaselineError,
    DegenerateVarianceError,
    InvalidArgumentError,
    UndefinedMetricError,
)
from .models import TrainedModel, softmax
from .smoothing import SmoothingConfig, smooth

DEFAULT_FRACTIONS = tuple(round(0.05 * k, 2) for k in range(1, 11))
RAW = "raw"


@dataclass
class PerturbationCurve:
    fractions: np.ndarray
    confidence_drop: np.ndarray
    base_confidence: float
    target_class: int

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.confidence_drop = np.asarray(self.confidence_drop, dtype=np.float64)
        if self.fractions.shape != self.confidence_drop.shape:
            raise InvalidArgumentError("fractions and drops must have equal length")
        if np.any(np.diff(self.fractions) <= 0):
            raise InvalidArgumentError("fractions must be strictly ascending")
        if self.fractions.size and (self.fractions[0] < 0 or self.fractions[-1] > 1):
            raise InvalidArgumentError("fractions must lie in [0, 1]")
        if np.any(self.confidence_drop < 0) or np.any(self.confidence_drop > 1):
            raise InvalidArgumentError("drops must lie in [0, 1]")


def temporal_variance(A: AttributionMap | np.ndarray) -> float:
    """Mean squared Euclidean distance between consecutive attribution vectors."""
    V = A.values if isinstance(A, AttributionMap) else np.asarray(A, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape[0] < 2:
        raise UndefinedMetricError("temporal variance needs at least two frames")
    diff = V[1:] - V[:-1]
    return float(np.sum(diff * diff) / (V.shape[0] - 1))


def rank_cells(scores: np.ndarray, abs_rank: bool = False) -> np.ndarray:
    """Flat (row-major) cell indices by descending score; ties go to earlier t, then lower feature."""
    s = np.abs(scores) if abs_rank else scores
    return np.argsort(-s.ravel(), kind="stable")


def _n_masked(fraction: float, n_cells: int) -> int:
    # guard against 0.05 * 7500 = 375.00000000000006
    return min(n_cells, math.ceil(fraction * n_cells - 1e-9))


def perturbation_curve(model: TrainedModel, x: FeatureSequence, A: AttributionMap,
                       fractions: Sequence[float] = DEFAULT_FRACTIONS, abs_rank: bool = False) -> PerturbationCurve:
    """Relative confidence drop as the top-ranked cells are cumulatively zeroed."""
    cells = A.expand()
    if cells.shape != x.data.shape:
        raise InvalidArgumentError(f"attribution grid {cells.shape} does not match input {x.data.shape}")
    fr = np.asarray(fractions, dtype=np.float64)
    c = A.target_class
    p0 = float(model.predict_proba(x)[c])
    if p0 <= 0:
        raise DegenerateBaselineError("unmasked target probability is zero")
    order = rank_cells(cells, abs_rank)
    n_cells = cells.size
    X = np.repeat(x.data[None], fr.size, axis=0).reshape(fr.size, -1)
    for r, f in enumerate(fr):
        X[r, order[:_n_masked(f, n_cells)]] = 0.0
    pf = softmax(model.logits(X.reshape(fr.size, *x.data.shape)))[:, c]
    drops = np.maximum(0.0, (p0 - pf) / p0)
    return PerturbationCurve(fr, drops, p0, c)


def aup(curve: PerturbationCurve) -> float:
    """Area under the perturbation curve as the mean drop over the fraction grid."""
    if curve.confidence_drop.size == 0:
        raise InvalidArgumentError("empty fraction grid")
    return float(np.clip(curve.confidence_drop.mean(), 0.0, 1.0))


def per_joint_magnitude(A: AttributionMap) -> np.ndarray:
    """Mean over time of the summed absolute attribution of each joint's coordinates."""
    cells = np.abs(A.expand(split=True))
    return cells.reshape(A.T, N_JOINTS, N_COORDS).sum(axis=2).mean(axis=0)


def latency_profile(task: Callable[[], object], n_runs: int = 10, warmup: int = 1) -> tuple[float, float, float]:
    """(mean, sd, p95) wall time of ``task`` in milliseconds."""
    if n_runs < 1 or warmup < 0:
        raise InvalidArgumentError("need n_runs >= 1 and warmup >= 0")
    for _ in range(warmup):
        task()
    times = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        task()
        times.append((time.perf_counter() - t0) * 1e3)
    sd = statistics.stdev(times) if n_runs > 1 else 0.0
    return statistics.fmean(times), sd, float(np.percentile(times, 95))


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, int]:
    """Paired t statistic on ``a - b`` and its degrees of freedom."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise InvalidArgumentError("need two equal-length sequences of at least 2 values")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError("differences have zero variance")
    return float(d.mean() / (sd / math.sqrt(d.size))), d.size - 1


# --------------------------------------------------------------------------
# method comparison


@dataclass
class MetricsRow:
    fold: int
    seq_id: int
    method: str
    smoothing: str
    aup: float
    tv: float
    latency_ms: float
    correct: int
    per_joint: np.ndarray


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)
    curves: dict = field(default_factory=dict)

    def extend(self, other: "MetricsReport") -> None:
        self.rows.extend(other.rows)
        self.curves.update(other.curves)

    def cells(self) -> list[tuple[str, str]]:
        seen = {}
        for r in self.rows:
            seen.setdefault((r.method, r.smoothing), None)
        return list(seen)

    def fold_means(self, metric: str, method: str, smoothing: str) -> dict[int, float]:
        per: dict[int, list[float]] = {}
        for r in self.rows:
            if r.method == method and r.smoothing == smoothing:
                per.setdefault(r.fold, []).append(float(getattr(r, metric)))
        return {f: statistics.fmean(v) for f, v in sorted(per.items())}

    def summary(self) -> dict:
        """Mean and SD across folds of the per-fold means, per (method, smoothing)."""
        out = {}
        for method, sm in self.cells():
            entry = {}
            for metric in ("aup", "tv", "correct", "latency_ms"):
                vals = list(self.fold_means(metric, method, sm).values())
                name = "accuracy" if metric == "correct" else metric
                entry[name] = {
                    "mean": statistics.fmean(vals),
                    "sd": statistics.stdev(vals) if len(vals) > 1 else 0.0,
                    "folds": vals,
                }
            out[f"{method}|{sm}"] = entry
        return out


def _label_for(model: TrainedModel, x: FeatureSequence) -> int:
    return to_binary_label(x.label) if model.config.binary_mode else x.label


def base_attribution(method: str, model: TrainedModel, x: FeatureSequence, target: int,
                     cnn_model: TrainedModel | None = None, shap_kwargs: dict | None = None) -> AttributionMap:
    if method == "shap":
        return shapley_full(model, x, target_class=target, **(shap_kwargs or {}))
    if method == "saliency":
        return gradient_saliency(model, x, target)
    if method == "gradcam":
        if cnn_model is None:
            raise InvalidArgumentError("gradcam needs a cnn model")
        return grad_cam(cnn_model, x, target)
    raise InvalidArgumentError(f"unknown attribution method {method!r}")


def evaluate_maps(model: TrainedModel, x: FeatureSequence, maps: dict[tuple[str, str], AttributionMap],
                  fold: int, fractions=DEFAULT_FRACTIONS, abs_rank: bool = False,
                  latency: dict | None = None) -> MetricsReport:
    """Metrics for already computed maps keyed by (method, smoothing label)."""
    pred = int(np.argmax(model.predict_proba(x)))
    correct = int(pred == _label_for(model, x))
    rep = MetricsReport()
    for (method, sm), A in maps.items():
        curve = perturbation_curve(model, x, A, fractions, abs_rank)
        rep.rows.append(MetricsRow(fold, x.seq_id, method, sm, aup(curve), temporal_variance(A),
                                   (latency or {}).get((method, sm), 0.0), correct, per_joint_magnitude(A)))
        rep.curves[(fold, x.seq_id, method, sm)] = curve
    return rep


def compare_methods(model: TrainedModel, sequences: Sequence[FeatureSequence], methods: Sequence[str],
                    smoothing_cfgs: Sequence[SmoothingConfig | None], fold: int = 0,
                    cnn_model: TrainedModel | None = None, fractions=DEFAULT_FRACTIONS,
                    abs_rank: bool = False, shap_kwargs: dict | None = None) -> MetricsReport:
    """Every (method, smoothing) pair on every sequence, all judged against ``model``.

    Attributions target the class ``model`` predicts; Grad-CAM maps come from
    ``cnn_model`` but their faithfulness is still measured on ``model`` so that
    all rows share identical predictions.
    """
    report = MetricsReport()
    for x in sequences:
        target = int(np.argmax(model.predict_proba(x)))
        maps, lat = {}, {}
        for method in methods:
            t0 = time.perf_counter()
            base = base_attribution(method, model, x, target, cnn_model, shap_kwargs)
            base_ms = (time.perf_counter() - t0) * 1e3
            for cfg in smoothing_cfgs:
                t1 = time.perf_counter()
                A = smooth(base, cfg)
                key = (method, RAW if cfg is None else cfg.tag)
                lat[key] = base_ms + (time.perf_counter() - t1) * 1e3
                maps[key] = A
        report.extend(evaluate_maps(model, x, maps, fold, fractions, abs_rank, lat))
    return report


# --------------------------------------------------------------------------
# serialization: long CSV (fold, seq_id, method, smoothing, metric, value) + JSON summary

REPORT_HEADER = ("fold", "seq_id", "method", "smoothing", "metric", "value")


def write_report(report: MetricsReport, csv_path: str | Path, json_path: str | Path | None = None,
                 include_latency: bool = False) -> None:
    """Wall-clock latency is nondeterministic, so it is left out of the CSV unless asked for."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.rows:
            metrics = [("aup", r.aup), ("tv", r.tv), ("correct", float(r.correct))]
            if include_latency:
                metrics.append(("latency_ms", r.latency_ms))
            for name, v in metrics:
                w.writerow([r.fold, r.seq_id, r.method, r.smoothing, name, repr(float(v))])
    if json_path is not None:
        summary = report.summary()
        if not include_latency:
            for entry in summary.values():
                entry.pop("latency_ms")
        Path(json_path).write_text(json.dumps(summary, indent=1, sort_keys=True))


def read_report(csv_path: str | Path) -> MetricsReport:
    acc: dict[tuple, dict] = {}
    with open(csv_path, newline="") as fh:
        r = csv.reader(fh)
        if tuple(next(r)) != REPORT_HEADER:
            raise InvalidArgumentError(f"{csv_path}: unexpected report header")
        for fold, sid, method, sm, metric, value in r:
            acc.setdefault((int(fold), int(sid), method, sm), {})[metric] = float(value)
    rows = [MetricsRow(f, s, m, sm, d["aup"], d["tv"], d.get("latency_ms", 0.0), int(d["correct"]), np.zeros(N_JOINTS))
            for (f, s, m, sm), d in acc.items()]
    return MetricsReport(rows)


def confusion_counts(y_true: Sequence[int], y_pred: Sequence[int], positive: int) -> tuple[int, int, int, int]:
    """(tp, fp, fn, tn) for ``positive`` against the rest."""
    yt = np.asarray(y_true) == positive
    yp = np.asarray(y_pred) == positive
    return int(np.sum(yt & yp)), int(np.sum(~yt & yp)), int(np.sum(yt & ~yp)), int(np.sum(~yt & ~yp))


def classification_scores(y_true: Sequence[int], y_pred: Sequence[int], positive: int) -> dict[str, float]:
    """Accuracy over all classes plus precision, recall and F1 of ``positive`` vs rest."""
    tp, fp, fn, _ = confusion_counts(y_true, y_pred, positive)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    acc = float(np.mean(np.asarray(y_true) == np.asarray(y_pred)))
    return {"accuracy": acc, "precision": precision, "recall": recall, "f1": f1}
