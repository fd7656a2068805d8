"""Supervised (input window, label window) pairs and batching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, WindowError


@dataclass(frozen=True)
class WindowSpec:
    w_in: int
    w_lbl: int = 1
    shift: int = 1

    def __post_init__(self):
        if self.w_in < 1 or self.w_lbl < 1 or self.shift < 0:
            raise ConfigError(f"invalid window spec {self}")
        if self.w_lbl > self.w_tot:
            raise ConfigError(f"label width {self.w_lbl} exceeds total span {self.w_tot}")

    @property
    def w_tot(self) -> int:
        return self.w_in + self.shift

    def count(self, n: int) -> int:
        """Number of windows for a split of length ``n`` (may be <= 0)."""
        return n - self.w_tot - self.w_lbl + 1

    def min_length(self) -> int:
        return self.w_tot + self.w_lbl


@dataclass(frozen=True)
class FeatureSelector:
    """Zero-based columns used as label features, in output order."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(idx) == 0 or len(set(idx)) != len(idx) or min(idx) < 0:
            raise ConfigError(f"feature selector must be distinct non-negative indices, got {self.indices}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def identity(cls, n_out: int) -> "FeatureSelector":
        return cls(tuple(range(n_out)))

    def validate(self, d: int) -> None:
        if max(self.indices) >= d:
            raise ConfigError(f"feature index {max(self.indices)} out of range for d={d}")


@dataclass
class WindowSet:
    """Stacked windows: ``X`` is (M, w_in, d), ``Y`` is (M, w_lbl, C).

    ``starts[k]`` is the zero-based row of the series where window ``k``
    begins; ``label_rows[k]`` are the series rows its labels come from.
    """

    X: np.ndarray
    Y: np.ndarray
    starts: np.ndarray
    spec: WindowSpec

    def __len__(self):
        return self.X.shape[0]

    @property
    def label_rows(self) -> np.ndarray:
        first = self.starts + self.spec.w_tot - self.spec.w_lbl
        return first[:, None] + np.arange(self.spec.w_lbl)[None, :]


def make_windows(series: np.ndarray, spec: WindowSpec, sel: FeatureSelector | None = None) -> WindowSet:
    """Slide a window over one split.

    Window ``t`` takes rows ``t .. t+w_in-1`` as input and rows
    ``t+w_tot-w_lbl .. t+w_tot-1`` (selected columns) as labels, for
    ``t = 0 .. N - w_tot - w_lbl``.
    """
    series = np.asarray(series, dtype=np.float64)
    n, d = series.shape
    sel = sel or FeatureSelector.identity(d)
    sel.validate(d)
    m = spec.count(n)
    if m <= 0:
        raise WindowError(
            f"split of length {n} yields no windows; need at least {spec.min_length()} rows "
            f"for w_in={spec.w_in}, shift={spec.shift}, w_lbl={spec.w_lbl}")
    starts = np.arange(m)
    xi = starts[:, None] + np.arange(spec.w_in)[None, :]
    yi = starts[:, None] + spec.w_tot - spec.w_lbl + np.arange(spec.w_lbl)[None, :]
    X = series[xi]
    Y = series[yi][:, :, list(sel.indices)]
    return WindowSet(X, Y, starts, spec)


def batch(ws: WindowSet, batch_size: int, shuffle: bool = False, seed: int = 0) -> list:
    """Split a window set into ``(X, Y)`` batches of at most ``batch_size``.

    With ``shuffle`` the order is a permutation drawn from ``seed``; the last
    partial batch is kept.
    """
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    order = np.arange(len(ws))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(ws))
    return [(ws.X[idx], ws.Y[idx]) for idx in batch_indices(order, batch_size)]


def batch_indices(order: np.ndarray, batch_size: int) -> list:
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def persistence_forecast(ws: WindowSet, sel: Sequence[int] | None = None) -> np.ndarray:
    """Naive forecast: repeat the last observed input row for every label step."""
    idx = list(sel) if sel is not None else list(range(ws.Y.shape[2]))
    last = ws.X[:, -1, :][:, idx]
    return np.repeat(last[:, None, :], ws.spec.w_lbl, axis=1)
