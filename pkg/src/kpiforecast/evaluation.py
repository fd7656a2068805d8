"""RMSE in original units, connectivity classification and forecast plots."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError, ShapeError
from .forecaster import ModelState, predict
from .preprocess import ScalerParams, inverse_transform
from .windowing import FeatureSelector, WindowSet, persistence_forecast


def rmse(pred_orig, label_orig) -> float:
    """Root mean squared error over all flattened elements."""
    pred = np.asarray(pred_orig, dtype=np.float64)
    label = np.asarray(label_orig, dtype=np.float64)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction shape {pred.shape} != label shape {label.shape}")
    if pred.size == 0:
        raise ShapeError("rmse of an empty array")
    return float(np.sqrt(np.mean((pred - label) ** 2)))


@dataclass
class PhaseMetrics:
    rmse: float
    per_feature: list
    n_samples: int
    persistence_rmse: float

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "per_feature_rmse": self.per_feature,
                "n_samples": self.n_samples, "persistence_rmse": self.persistence_rmse}


@dataclass
class EvalReport:
    phases: dict = field(default_factory=dict)
    feature_names: Optional[list] = None

    @property
    def rmse_train(self) -> float:
        return self.phases["train"].rmse

    @property
    def rmse_test(self) -> float:
        return self.phases["test"].rmse

    def to_dict(self) -> dict:
        out = {"feature_names": self.feature_names,
               "phases": {k: v.to_dict() for k, v in self.phases.items()}}
        for k, v in self.phases.items():
            out[f"rmse_{k}"] = v.rmse
        return out


@dataclass
class PhaseOutput:
    metrics: PhaseMetrics
    pred_orig: np.ndarray
    label_orig: np.ndarray
    persistence_orig: np.ndarray


def evaluate_phase(state: ModelState, windows: WindowSet, scaler: ScalerParams,
                   sel: Optional[FeatureSelector] = None) -> PhaseOutput:
    """Predict, inverse-scale predictions and labels, and score one split."""
    C = state.config.C
    sel = sel or FeatureSelector.identity(C)
    if len(sel.indices) != C or windows.Y.shape[2] != C:
        raise ShapeError(f"model emits {C} features, selector has {len(sel.indices)}, "
                         f"labels have {windows.Y.shape[2]}")
    sel.validate(scaler.d)
    label_scaler = scaler.select(sel.indices)
    pred = inverse_transform(label_scaler, predict(state, windows))
    label = inverse_transform(label_scaler, windows.Y)
    pers = inverse_transform(label_scaler, persistence_forecast(windows, sel.indices))
    per_feature = [rmse(pred[..., c], label[..., c]) for c in range(C)]
    metrics = PhaseMetrics(rmse(pred, label), per_feature, int(pred.size), rmse(pers, label))
    return PhaseOutput(metrics, pred, label, pers)


def evaluate(state: ModelState, windows: dict, scaler: ScalerParams,
             sel: Optional[FeatureSelector] = None, feature_names=None) -> EvalReport:
    """Score every ``{phase: WindowSet}`` entry in original units."""
    report = EvalReport(feature_names=list(feature_names) if feature_names is not None else None)
    for phase, ws in windows.items():
        report.phases[phase] = evaluate_phase(state, ws, scaler, sel).metrics
    return report


@dataclass
class ConnectivityReport:
    threshold: float
    kappa: float
    conn_floor: float
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    predicted_connected: list
    actual_connected: list

    def to_dict(self, with_sequences: bool = True) -> dict:
        d = {"threshold": self.threshold, "kappa": self.kappa, "conn_floor": self.conn_floor,
             "accuracy": self.accuracy, "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
             "n": len(self.predicted_connected)}
        if with_sequences:
            d["predicted_connected"] = [int(v) for v in self.predicted_connected]
            d["actual_connected"] = [int(v) for v in self.actual_connected]
        return d


def connectivity_threshold(kappa: float, conn_floor: float) -> float:
    if not conn_floor > kappa:
        raise ConfigError(f"conn_floor ({conn_floor}) must exceed kappa ({kappa})")
    return kappa + (conn_floor - kappa) / 2.0


def classify_connectivity(pred_orig: Sequence[float], kappa: float, conn_floor: float,
                          disconnected: Sequence[bool]) -> ConnectivityReport:
    """Threshold forecasts at the midpoint between ``kappa`` and ``conn_floor``.

    A step is predicted connected iff its forecast exceeds the threshold.
    ``disconnected`` is the ground-truth mask (Missing before imputation);
    connected is the positive class.
    """
    thr = connectivity_threshold(kappa, conn_floor)
    pred = np.asarray(pred_orig, dtype=np.float64).reshape(-1)
    actual = ~np.asarray(disconnected, dtype=bool).reshape(-1)
    if pred.shape != actual.shape:
        raise ShapeError(f"{pred.size} forecasts but {actual.size} ground-truth states")
    predicted = pred > thr
    tp = int(np.sum(predicted & actual))
    tn = int(np.sum(~predicted & ~actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    acc = (tp + tn) / pred.size if pred.size else 0.0
    return ConnectivityReport(thr, float(kappa), float(conn_floor), acc, tp, fp, tn, fn,
                              predicted.tolist(), actual.tolist())


def _runs(mask):
    """(start, stop) pairs of consecutive True entries."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(m.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def emit_forecast_plot(actual, predicted, path, disconnected=None, kappa: float = 0.0,
                       title: str = "SINR forecast", unit: str = "dB") -> None:
    """Write an SVG overlay of actual vs predicted plus a CSV next to it.

    Disconnected intervals (``disconnected`` mask, or ``actual == kappa``
    when no mask is given) are shaded. The CSV has columns
    ``time, actual, predicted`` and shares the SVG's basename.
    """
    actual = np.asarray(actual, dtype=np.float64).reshape(-1)
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if actual.shape != predicted.shape:
        raise ShapeError(f"actual has {actual.size} points, predicted has {predicted.size}")
    mask = actual == kappa if disconnected is None else np.asarray(disconnected, dtype=bool).reshape(-1)
    if mask.shape != actual.shape:
        raise ShapeError("disconnection mask length does not match the series")

    width, height, ml, mr, mt, mb = 900, 320, 60, 20, 30, 40
    pw, ph = width - ml - mr, height - mt - mb
    n = actual.size
    lo = float(min(actual.min(), predicted.min())) if n else 0.0
    hi = float(max(actual.max(), predicted.max())) if n else 1.0
    if hi == lo:
        hi = lo + 1.0

    def sx(i):
        return ml + (pw * i / (n - 1) if n > 1 else pw / 2)

    def sy(v):
        return mt + ph * (hi - v) / (hi - lo)

    def points(y):
        return " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(y))

    step = pw / max(n - 1, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="white" stroke="black"/>',
    ]
    for a, b in _runs(mask):
        x0 = sx(a) - step / 2
        parts.append(f'<rect class="disconnected" x="{x0:.2f}" y="{mt}" '
                     f'width="{step * (b - a):.2f}" height="{ph}" fill="#d0d0d0" opacity="0.6" '
                     f'data-start="{a}" data-stop="{b}"/>')
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        parts.append(f'<text x="{ml - 6}" y="{sy(v) + 4:.2f}" font-size="11" text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 8}" font-size="12" text-anchor="middle">time step (s)</text>')
    parts.append(f'<text x="14" y="{mt + ph / 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {mt + ph / 2})">{escape(unit)}</text>')
    parts.append(f'<polyline class="actual" fill="none" stroke="#1f77b4" stroke-width="1.2" points="{points(actual)}"/>')
    parts.append(f'<polyline class="predicted" fill="none" stroke="#d62728" stroke-width="1.2" '
                 f'stroke-dasharray="4 2" points="{points(predicted)}"/>')
    parts.append('</svg>')
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")

    with open(os.path.splitext(os.fspath(path))[0] + ".csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["time", "actual", "predicted"])
        for i, (a, p) in enumerate(zip(actual, predicted)):
            w.writerow([i, repr(float(a)), repr(float(p))])
