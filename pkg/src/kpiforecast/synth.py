"""Synthetic per-second KPI logs in the testbed JSON schema.

A semi-Markov chain switches between LOS, NLOS and disconnected regimes
with geometric dwell times. While connected, SINR follows an AR(1) process
around the regime mean; auxiliary KPIs are noisy affine functions of SINR.
Disconnected seconds are logged with an empty ``ues`` list, so extraction
produces Missing for them.

Record layout::

    [{"timestamp": 0, "ues": [{"rnti": 17921, "sinr": 19.84, "rssi": -70.3, ...}]},
     {"timestamp": 1, "ues": []},
     ...]
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError

LOS, NLOS, DISCONNECTED = 0, 1, 2
REGIME_NAMES = ("LOS", "NLOS", "disconnected")
KNOWN_FEATURES = ("sinr", "rssi", "phr", "mcs")
RNTI = 17921

# affine maps from SINR (dB): (offset, slope, noise std)
_RSSI = (-88.0, 0.9, 1.0)
_PHR = (32.0, -0.6, 1.0)


@dataclass(frozen=True)
class TraceConfig:
    duration: int = 3600
    seed: int = 0
    los_mean: float = 20.0
    nlos_mean: float = 8.0
    # per-second SINR under fast fading is close to uncorrelated
    los_ar: float = 0.0
    nlos_ar: float = 0.0
    los_noise: float = 4.0
    nlos_noise: float = 3.0
    dwell_los: float = 30.0
    dwell_nlos: float = 20.0
    dwell_disconnected: float = 5.0
    # relative probability of jumping into LOS / NLOS / disconnected
    entry_weights: tuple = (1.0, 1.0, 1.0)
    features: tuple = KNOWN_FEATURES
    kappa: float = 0.0
    decimals: int = 2

    def __post_init__(self):
        object.__setattr__(self, "entry_weights", tuple(float(w) for w in self.entry_weights))
        object.__setattr__(self, "features", tuple(self.features))
        if self.duration < 1:
            raise ConfigError("duration must be >= 1 s")
        if min(self.dwell_los, self.dwell_nlos, self.dwell_disconnected) < 1:
            raise ConfigError("mean dwell times must be >= 1 s")
        if not self.los_mean > self.nlos_mean > self.kappa:
            raise ConfigError("need los_mean > nlos_mean > kappa")
        if not (-1 < self.los_ar < 1 and -1 < self.nlos_ar < 1):
            raise ConfigError("AR coefficients must lie in (-1, 1)")
        if min(self.los_noise, self.nlos_noise) < 0:
            raise ConfigError("noise std must be >= 0")
        if len(self.entry_weights) != 3 or min(self.entry_weights) < 0 or sum(self.entry_weights) == 0:
            raise ConfigError("entry_weights must be three non-negative numbers, not all zero")
        if "sinr" not in self.features or not set(self.features) <= set(KNOWN_FEATURES):
            raise ConfigError(f"features must include 'sinr' and be drawn from {KNOWN_FEATURES}")

    @property
    def dwell_means(self) -> np.ndarray:
        return np.array([self.dwell_los, self.dwell_nlos, self.dwell_disconnected])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["entry_weights"] = list(self.entry_weights)
        d["features"] = list(self.features)
        return d


@dataclass
class Trace:
    document: list
    regimes: np.ndarray
    kpis: dict = field(default_factory=dict)

    @property
    def disconnected(self) -> np.ndarray:
        return self.regimes == DISCONNECTED


def jump_matrix(weights) -> np.ndarray:
    """Regime-to-regime jump probabilities (no self-jumps unless forced)."""
    w = np.asarray(weights, dtype=np.float64)
    P = np.tile(w, (3, 1))
    np.fill_diagonal(P, 0.0)
    for i in range(3):
        if P[i].sum() == 0:
            P[i, i] = 1.0
    return P / P.sum(axis=1, keepdims=True)


def regime_sequence(cfg: TraceConfig, rng: np.random.Generator) -> np.ndarray:
    P = jump_matrix(cfg.entry_weights)
    w = np.asarray(cfg.entry_weights)
    state = int(rng.choice(3, p=w / w.sum()))
    out = np.empty(cfg.duration, dtype=np.int64)
    pos = 0
    means = cfg.dwell_means
    while pos < cfg.duration:
        dwell = int(rng.geometric(1.0 / means[state]))
        out[pos:pos + dwell] = state
        pos += dwell
        state = int(rng.choice(3, p=P[state]))
    return out


def generate_trace(cfg: TraceConfig) -> Trace:
    """Deterministic synthetic log for ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    regimes = regime_sequence(cfg, rng)
    n = cfg.duration
    eps = rng.standard_normal(n)
    means = (cfg.los_mean, cfg.nlos_mean)
    ars = (cfg.los_ar, cfg.nlos_ar)
    noises = (cfg.los_noise, cfg.nlos_noise)

    sinr = np.full(n, np.nan)
    dev = 0.0
    for t in range(n):
        r = regimes[t]
        if r == DISCONNECTED:
            continue
        phi, sigma = ars[r], noises[r]
        if t == 0 or regimes[t - 1] != r:
            dev = sigma / np.sqrt(1.0 - phi * phi) * eps[t]
        else:
            dev = phi * dev + sigma * eps[t]
        sinr[t] = means[r] + dev

    kpis = {"sinr": np.round(sinr, cfg.decimals)}
    aux = rng.standard_normal((2, n))
    if "rssi" in cfg.features:
        kpis["rssi"] = np.round(_RSSI[0] + _RSSI[1] * sinr + _RSSI[2] * aux[0], cfg.decimals)
    if "phr" in cfg.features:
        kpis["phr"] = np.round(_PHR[0] + _PHR[1] * sinr + _PHR[2] * aux[1], cfg.decimals)
    if "mcs" in cfg.features:
        kpis["mcs"] = np.where(np.isnan(sinr), np.nan, np.clip(np.round(1.1 * np.nan_to_num(sinr) + 2.0), 0, 28))

    document = []
    for t in range(n):
        if regimes[t] == DISCONNECTED:
            ues = []
        else:
            ue = {"rnti": RNTI}
            for name in cfg.features:
                v = float(kpis[name][t])
                ue[name] = int(v) if name == "mcs" else v
            ues = [ue]
        document.append({"timestamp": t, "ues": ues})
    return Trace(document, regimes, {k: kpis[k] for k in cfg.features})


def write_trace(doc, path) -> None:
    """Serialize a generated document as compact UTF-8 JSON, one record per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("[\n")
        for i, rec in enumerate(doc):
            f.write(json.dumps(rec, separators=(",", ":")))
            f.write(",\n" if i + 1 < len(doc) else "\n")
        f.write("]\n")


def write_regimes(regimes: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "regime", "connected"])
        for t, r in enumerate(regimes):
            w.writerow([t, REGIME_NAMES[r], int(r != DISCONNECTED)])


def read_regimes(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return np.array([REGIME_NAMES.index(r["regime"]) for r in rows], dtype=np.int64)


def expected_occupancy(cfg: TraceConfig) -> np.ndarray:
    """Long-run fraction of time in each regime.

    Stationary distribution of the jump chain weighted by mean dwell times.
    """
    P = jump_matrix(cfg.entry_weights)
    vals, vecs = np.linalg.eig(P.T)
    pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    pi = pi / pi.sum()
    occ = pi * cfg.dwell_means
    return occ / occ.sum()


def config_from_dict(obj: Optional[dict]) -> TraceConfig:
    obj = dict(obj or {})
    unknown = set(obj) - set(TraceConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    return TraceConfig(**obj)
