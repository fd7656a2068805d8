"""Pipeline stages wired by a single configuration document.

Every stage reads its inputs from and writes its artifacts to the output
directory, together with a ``manifest_<stage>.json`` recording the
effective configuration, its hash, the seed and the SHA-256 of every input
and output file. ``run`` calls the stages in order, so it produces the
same bytes as invoking them one by one.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import __version__
from .errors import ConfigError, DataError
from .evaluation import classify_connectivity, emit_forecast_plot, evaluate_phase
from .forecaster import ModelConfig, init_model, load_checkpoint, save_checkpoint, train
from .jsonextract import DEFAULT_MAX_DEPTH, KpiTable, export_csv, extract_table, import_csv, load_document
from .preprocess import ImputationConfig, ScalerParams, SplitRatios, fit_scaler, impute, split, split_sizes, transform
from .synth import config_from_dict, generate_trace, write_regimes, write_trace
from .windowing import FeatureSelector, WindowSpec, make_windows

DEFAULTS = {
    "seed": 0,
    "out_dir": "kpi_run",
    "input": None,
    "keys": {"k1": "ues", "k2": ["sinr"]},
    "max_depth": DEFAULT_MAX_DEPTH,
    "synth": {"duration": 3600},
    "impute": {"kappa": 0.0},
    "split": {"train": 0.7, "val": 0.2, "test": 0.1},
    "window": {"w_in": 12, "w_lbl": 1, "shift": 1, "label_features": [0]},
    "model": {"u": 32, "h": 16, "eta": 1e-3, "epochs": 50, "batch_size": 4, "shuffle": True},
    "eval": {"conn_floor": None},
}

TRACE_FILE = "trace.json"
REGIMES_FILE = "regimes.csv"
KPI_FILE = "kpi.csv"
SCALER_FILE = "scaler.json"
SPLIT_FILE = "split.json"
SPLIT_FILES = {"train": "train_scaled.csv", "val": "val_scaled.csv", "test": "test_scaled.csv"}
CHECKPOINT_FILE = "model.ckpt"
HISTORY_FILE = "history.json"
TIMING_FILE = "timing.json"
EVAL_FILE = "eval_report.json"
CONNECTIVITY_FILE = "connectivity_report.json"
PLOT_FILE = "forecast.svg"

STAGES = ("synth", "extract", "prepare", "train", "eval")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    """Validated view of the configuration document.

    One seed drives the synthetic trace, weight initialization and batch
    shuffling.
    """

    raw: dict

    @classmethod
    def from_dict(cls, obj: Optional[dict] = None) -> "PipelineConfig":
        obj = obj or {}
        unknown = set(obj) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = _merge(DEFAULTS, obj)
        for section in ("synth", "model"):
            if "seed" in raw[section]:
                raise ConfigError(f"'{section}.seed' is not allowed; use the top-level seed")
        if isinstance(raw["input"], str):
            raw["input"] = [raw["input"]]
        if isinstance(raw["keys"]["k2"], str):
            raw["keys"]["k2"] = [raw["keys"]["k2"]]
        cfg = cls(raw)
        # construct once so invalid values fail before any stage runs
        cfg.trace_config, cfg.window_spec, cfg.selector, cfg.ratios, cfg.imputation
        cfg.model_config(d=max(cfg.selector.indices) + 1)
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as f:
                obj = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON config: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(obj)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out_dir(self) -> str:
        return self.raw["out_dir"]

    @property
    def trace_config(self):
        kappa = float(np.min(self.raw["impute"]["kappa"]))
        return config_from_dict({**self.raw["synth"], "seed": self.seed, "kappa": kappa})

    @property
    def imputation(self) -> ImputationConfig:
        k = self.raw["impute"]["kappa"]
        return ImputationConfig(tuple(k) if isinstance(k, list) else k)

    @property
    def ratios(self) -> SplitRatios:
        return SplitRatios(**self.raw["split"])

    @property
    def window_spec(self) -> WindowSpec:
        w = self.raw["window"]
        return WindowSpec(int(w["w_in"]), int(w["w_lbl"]), int(w["shift"]))

    @property
    def selector(self) -> FeatureSelector:
        return FeatureSelector(tuple(self.raw["window"]["label_features"]))

    def model_config(self, d: int) -> ModelConfig:
        m = self.raw["model"]
        try:
            return ModelConfig(d=d, T=self.window_spec.w_in, C=len(self.selector.indices),
                               seed=self.seed, **m)
        except TypeError as exc:
            raise ConfigError(f"invalid model config: {exc}") from None

    @property
    def conn_floor(self) -> float:
        cf = self.raw["eval"]["conn_floor"]
        return float(cf) if cf is not None else float(self.trace_config.nlos_mean)

    def canonical(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _out(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg.out_dir, name)


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing input file: {path}")
    return path


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _manifest(cfg: PipelineConfig, stage: str, inputs: list, outputs: list, extra: Optional[dict] = None):
    def entry(p):
        rel = os.path.relpath(p, cfg.out_dir)
        return {"path": rel if not rel.startswith("..") else os.path.abspath(p), "sha256": sha256_file(p)}

    obj = {
        "stage": stage,
        "tool_version": __version__,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config": cfg.raw,
        "inputs": [entry(p) for p in inputs],
        "outputs": [entry(p) for p in outputs],
    }
    if extra:
        obj.update(extra)
    _write_json(_out(cfg, f"manifest_{stage}.json"), obj)


def input_paths(cfg: PipelineConfig) -> list:
    if cfg.raw["input"]:
        return list(cfg.raw["input"])
    return [_out(cfg, TRACE_FILE)]


# -- stages -------------------------------------------------------------------

def stage_synth(cfg: PipelineConfig) -> dict:
    os.makedirs(cfg.out_dir, exist_ok=True)
    trace = generate_trace(cfg.trace_config)
    tpath, rpath = _out(cfg, TRACE_FILE), _out(cfg, REGIMES_FILE)
    write_trace(trace.document, tpath)
    write_regimes(trace.regimes, rpath)
    _manifest(cfg, "synth", [], [tpath, rpath],
              {"n_records": len(trace.document), "n_disconnected": int(trace.disconnected.sum())})
    return {"trace": tpath, "regimes": rpath}


def stage_extract(cfg: PipelineConfig) -> dict:
    os.makedirs(cfg.out_dir, exist_ok=True)
    paths = [_require(p) for p in input_paths(cfg)]
    k1, k2 = cfg.raw["keys"]["k1"], cfg.raw["keys"]["k2"]
    blocks, names, bad = [], None, 0
    for p in paths:
        doc = load_document(p, max_depth=int(cfg.raw["max_depth"]))
        try:
            table, n_bad = extract_table(doc, k1, k2)
        except DataError as exc:
            raise DataError(f"{p}: {exc}") from None
        if names is not None and table.column_names != names:
            raise DataError(f"{p}: columns {table.column_names} differ from {names}")
        names = table.column_names
        blocks.append(table.data)
        bad += n_bad
    table = KpiTable(np.vstack(blocks), names)
    kpath = _out(cfg, KPI_FILE)
    export_csv(table, kpath)
    _manifest(cfg, "extract", paths, [kpath],
              {"shape": list(table.shape), "n_missing": int(table.missing_mask.sum()),
               "n_uncoercible": bad})
    return {"kpi": kpath, "table": table, "n_uncoercible": bad}


def _impute_split(cfg: PipelineConfig, table: KpiTable):
    imp = impute(table, cfg.imputation)
    parts = split(imp.series, cfg.ratios)
    n_tr, n_val, n_te = split_sizes(len(imp.series), cfg.ratios)
    masks = (imp.missing_mask[:n_tr], imp.missing_mask[n_tr:n_tr + n_val], imp.missing_mask[n_tr + n_val:])
    return imp, dict(zip(("train", "val", "test"), parts)), dict(zip(("train", "val", "test"), masks))


def stage_prepare(cfg: PipelineConfig) -> dict:
    kpath = _require(_out(cfg, KPI_FILE))
    table = import_csv(kpath, header=True)
    imp, parts, _ = _impute_split(cfg, table)
    scaler = fit_scaler(parts["train"])
    outputs = []
    for name, part in parts.items():
        p = _out(cfg, SPLIT_FILES[name])
        export_csv(KpiTable(transform(scaler, part), table.column_names), p)
        outputs.append(p)
    spath = _out(cfg, SCALER_FILE)
    scaler.save(spath)
    info = {"sizes": {k: len(v) for k, v in parts.items()},
            "imputed_per_feature": [int(c) for c in imp.counts],
            "column_names": list(table.column_names or [])}
    ipath = _out(cfg, SPLIT_FILE)
    _write_json(ipath, info)
    _manifest(cfg, "prepare", [kpath], outputs + [spath, ipath])
    return {"scaler": scaler, **info}


def _load_windows(cfg: PipelineConfig):
    spec, sel = cfg.window_spec, cfg.selector
    out = {}
    for name, fname in SPLIT_FILES.items():
        series = import_csv(_require(_out(cfg, fname)), header=True).data
        try:
            out[name] = make_windows(series, spec, sel)
        except DataError as exc:
            raise type(exc)(f"{name} split: {exc}") from None
    return out


def stage_train(cfg: PipelineConfig, progress: Optional[Callable[[dict], None]] = None) -> dict:
    windows = _load_windows(cfg)
    spath = _require(_out(cfg, SCALER_FILE))
    scaler = ScalerParams.load(spath)
    mcfg = cfg.model_config(d=windows["train"].X.shape[2])
    state = init_model(mcfg, scaler)
    state, history = train(state, windows["train"], windows["val"], progress=progress)
    ckpt = _out(cfg, CHECKPOINT_FILE)
    save_checkpoint(state, ckpt, scaler_ref=SCALER_FILE)
    hpath = _out(cfg, HISTORY_FILE)
    _write_json(hpath, {"epochs": history.records()})
    # wall-clock lives in its own file so the other artifacts stay reproducible
    _write_json(_out(cfg, TIMING_FILE), {"seconds_per_epoch": history.seconds})
    inputs = [_out(cfg, f) for f in SPLIT_FILES.values()] + [spath]
    _manifest(cfg, "train", inputs, [ckpt, hpath], {"n_params": state.n_params})
    return {"state": state, "history": history}


def ground_truth_masks(cfg: PipelineConfig) -> dict:
    """Disconnection mask (Missing before imputation) per split."""
    table = import_csv(_require(_out(cfg, KPI_FILE)), header=True)
    _, _, masks = _impute_split(cfg, table)
    return masks


def stage_eval(cfg: PipelineConfig) -> dict:
    windows = _load_windows(cfg)
    ckpt = _require(_out(cfg, CHECKPOINT_FILE))
    state = load_checkpoint(ckpt)
    scaler = ScalerParams.load(_require(_out(cfg, SCALER_FILE)))
    sel = cfg.selector
    with open(_require(_out(cfg, SPLIT_FILE)), encoding="utf-8") as f:
        names = json.load(f)["column_names"]
    label_names = [names[i] for i in sel.indices] if names else None

    phases = {name: evaluate_phase(state, ws, scaler, sel) for name, ws in windows.items()}
    report = {"feature_names": label_names,
              "phases": {k: v.metrics.to_dict() for k, v in phases.items()},
              "rmse_train": phases["train"].metrics.rmse,
              "rmse_test": phases["test"].metrics.rmse}
    epath = _out(cfg, EVAL_FILE)
    _write_json(epath, report)

    test = phases["test"]
    mask_rows = ground_truth_masks(cfg)["test"][:, sel.indices[0]]
    disconnected = mask_rows[windows["test"].label_rows].reshape(-1)
    kappa = float(cfg.imputation.per_feature(scaler.d)[sel.indices[0]])
    conn = classify_connectivity(test.pred_orig[..., 0].reshape(-1), kappa, cfg.conn_floor, disconnected)
    cpath = _out(cfg, CONNECTIVITY_FILE)
    _write_json(cpath, conn.to_dict())

    ppath = _out(cfg, PLOT_FILE)
    emit_forecast_plot(test.label_orig[..., 0].reshape(-1), test.pred_orig[..., 0].reshape(-1), ppath,
                       disconnected=disconnected, kappa=kappa,
                       title=f"{label_names[0] if label_names else 'KPI'} forecast, kappa={kappa:g}")
    csv_path = os.path.splitext(ppath)[0] + ".csv"
    inputs = [ckpt, _out(cfg, SCALER_FILE), _out(cfg, KPI_FILE)] + [_out(cfg, f) for f in SPLIT_FILES.values()]
    _manifest(cfg, "eval", inputs, [epath, cpath, ppath, csv_path])
    return {"report": report, "connectivity": conn.to_dict(with_sequences=False)}


def stage_run(cfg: PipelineConfig, progress: Optional[Callable[[dict], None]] = None) -> dict:
    out = {}
    if not cfg.raw["input"]:
        out["synth"] = stage_synth(cfg)
    stage_extract(cfg)
    stage_prepare(cfg)
    stage_train(cfg, progress=progress)
    out["eval"] = stage_eval(cfg)
    return out
