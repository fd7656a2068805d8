"""Disconnection imputation, contiguous splitting and train-only min-max scaling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, FitError, ShapeError, SplitError
from .jsonextract import KpiTable


@dataclass(frozen=True)
class ImputationConfig:
    """Constant fill for disconnected (Missing) entries.

    ``kappa`` is either one value for every feature or one value per feature.
    It should sit at or below the connected range (the usual choice is 0).
    """

    kappa: Union[float, Sequence[float]] = 0.0

    def per_feature(self, d: int) -> np.ndarray:
        k = np.asarray(self.kappa, dtype=np.float64)
        if k.ndim == 0:
            k = np.full(d, float(k))
        if k.shape != (d,):
            raise ConfigError(f"kappa has {k.size} entries but the table has {d} features")
        if not np.all(np.isfinite(k)):
            raise ConfigError(f"kappa must be finite, got {self.kappa!r}")
        return k


@dataclass
class Imputed:
    series: np.ndarray
    missing_mask: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        """Number of replaced entries per feature."""
        return self.missing_mask.sum(axis=0)


def impute(table: Union[KpiTable, np.ndarray], cfg: ImputationConfig = ImputationConfig()) -> Imputed:
    """Replace every Missing entry of feature ``j`` by ``kappa_j``."""
    data = table.data if isinstance(table, KpiTable) else np.asarray(table, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 1:
        raise ShapeError(f"impute needs a table with at least one row, got shape {data.shape}")
    kappa = cfg.per_feature(data.shape[1])
    mask = np.isnan(data)
    out = np.where(mask, kappa[None, :], data)
    return Imputed(out, mask)


@dataclass(frozen=True)
class SplitRatios:
    train: float = 0.7
    val: float = 0.2
    test: float = 0.1

    def __post_init__(self):
        parts = (self.train, self.val, self.test)
        if any(p < 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-12:
            raise ConfigError(f"split ratios must be non-negative and sum to 1, got {parts}")


def split_sizes(n: int, ratios: SplitRatios = SplitRatios()) -> tuple[int, int, int]:
    """Partition sizes ``floor(r_train N)``, ``floor(r_val N)`` and the remainder.

    Products are floored in exact decimal arithmetic so that e.g. 0.7 * 70
    gives 49 rather than 48.
    """
    n_tr = math.floor(Fraction(repr(ratios.train)) * n)
    n_val = math.floor(Fraction(repr(ratios.val)) * n)
    return n_tr, n_val, n - n_tr - n_val


def split(series: np.ndarray, ratios: SplitRatios = SplitRatios()):
    """Split rows into contiguous (train, val, test) blocks, in order."""
    n = len(series)
    if n < 3:
        raise SplitError(f"need at least 3 rows to split, got {n}")
    n_tr, n_val, n_te = split_sizes(n, ratios)
    if min(n_tr, n_val, n_te) == 0:
        raise SplitError(f"empty partition for N={n}: sizes (train, val, test) = {(n_tr, n_val, n_te)}")
    return series[:n_tr], series[n_tr:n_tr + n_val], series[n_tr + n_val:]


@dataclass(frozen=True)
class ScalerParams:
    x_min: np.ndarray
    x_max: np.ndarray

    @property
    def degenerate_mask(self) -> np.ndarray:
        return self.x_max == self.x_min

    @property
    def d(self) -> int:
        return self.x_min.shape[0]

    def select(self, indices) -> "ScalerParams":
        idx = list(indices)
        return ScalerParams(self.x_min[idx], self.x_max[idx])

    def to_dict(self) -> dict:
        # repr() floats round-trip exactly through JSON
        return {
            "x_min": [float(v) for v in self.x_min],
            "x_max": [float(v) for v in self.x_max],
            "degenerate": [bool(v) for v in self.degenerate_mask],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ScalerParams":
        return cls(np.asarray(obj["x_min"], dtype=np.float64),
                   np.asarray(obj["x_max"], dtype=np.float64))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "ScalerParams":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def fit_scaler(train: np.ndarray) -> ScalerParams:
    """Column-wise min and max of the training split."""
    train = np.asarray(train, dtype=np.float64)
    if train.ndim != 2 or train.shape[0] == 0:
        raise FitError(f"cannot fit scaler on shape {train.shape}")
    if not np.all(np.isfinite(train)):
        raise FitError("training data contains non-finite values")
    return ScalerParams(train.min(axis=0), train.max(axis=0))


def _check(params: ScalerParams, m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-1] != params.d:
        raise ShapeError(f"scaler fitted on {params.d} features, got {m.shape[-1]}")
    return m


def transform(params: ScalerParams, m: np.ndarray) -> np.ndarray:
    """Map each feature affinely so the training range becomes [0, 1].

    Degenerate features (constant on train) map to 0. Values outside the
    training range land outside [0, 1]; they are not clipped.
    """
    m = _check(params, m)
    span = params.x_max - params.x_min
    degenerate = span == 0
    safe = np.where(degenerate, 1.0, span)
    return np.where(degenerate, 0.0, (m - params.x_min) / safe)


def inverse_transform(params: ScalerParams, m: np.ndarray) -> np.ndarray:
    """Undo :func:`transform`; degenerate features return ``x_min``."""
    m = _check(params, m)
    span = params.x_max - params.x_min
    return np.where(span == 0, params.x_min, m * span + params.x_min)
