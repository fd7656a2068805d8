"""Command line entry point.

Usage::

    kpiforecast run --config run.json --out-dir results/ --seed 7
    kpiforecast synth|extract|prepare|train|eval --config run.json

Exit codes: 0 success, 1 usage/config error, 2 data error,
3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, DataError, NumericalError
from . import pipeline

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--config", help="JSON pipeline configuration file")
    g.add_argument("--out-dir", help="artifact directory (overrides out_dir)")
    g.add_argument("--seed", type=int, help="seed for every random choice (overrides seed)")
    d = common.add_argument_group("data")
    d.add_argument("--input", nargs="+", help="recorded JSON log(s); default: the synthetic trace")
    d.add_argument("--k1", help="first-layer key (default: ues)")
    d.add_argument("--k2", nargs="+", help="KPI keys to extract (default: sinr)")
    d.add_argument("--kappa", type=float, help="fill value for disconnected seconds")
    d.add_argument("--duration", type=int, help="synthetic trace length in seconds")
    w = common.add_argument_group("window")
    w.add_argument("--w-in", type=int)
    w.add_argument("--w-lbl", type=int)
    w.add_argument("--shift", type=int)
    w.add_argument("--label-features", type=_int_list, help="zero-based label columns, e.g. 0,2")
    m = common.add_argument_group("model")
    m.add_argument("--units", type=int, help="LSTM units u")
    m.add_argument("--fc-width", type=int, help="dense base width h")
    m.add_argument("--eta", type=float, help="learning rate")
    m.add_argument("--epochs", type=int)
    m.add_argument("--batch-size", type=int)
    m.add_argument("--conn-floor", type=float, help="lowest connected KPI level for classification")

    parser = _Parser(prog="kpiforecast", description="KPI forecasting pipeline for RAN telemetry logs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth": "generate a synthetic KPI log",
        "extract": "extract KPI columns from JSON logs to CSV",
        "prepare": "impute, split and scale",
        "train": "train the forecaster",
        "eval": "evaluate, classify connectivity, plot",
        "run": "all stages in order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _overrides(args) -> dict:
    o = {}
    if args.out_dir is not None:
        o["out_dir"] = args.out_dir
    if args.seed is not None:
        o["seed"] = args.seed
    if args.input is not None:
        o["input"] = args.input
    keys = {}
    if args.k1 is not None:
        keys["k1"] = args.k1
    if args.k2 is not None:
        keys["k2"] = args.k2
    if keys:
        o["keys"] = keys
    if args.kappa is not None:
        o["impute"] = {"kappa": args.kappa}
    if args.duration is not None:
        o["synth"] = {"duration": args.duration}
    window = {k: v for k, v in (("w_in", args.w_in), ("w_lbl", args.w_lbl), ("shift", args.shift),
                                ("label_features", args.label_features)) if v is not None}
    if window:
        o["window"] = window
    model = {k: v for k, v in (("u", args.units), ("h", args.fc_width), ("eta", args.eta),
                               ("epochs", args.epochs), ("batch_size", args.batch_size)) if v is not None}
    if model:
        o["model"] = model
    if args.conn_floor is not None:
        o["eval"] = {"conn_floor": args.conn_floor}
    return o


def load_config(args) -> pipeline.PipelineConfig:
    base = {}
    if args.config:
        base = pipeline.PipelineConfig.load(args.config).raw
    return pipeline.PipelineConfig.from_dict(pipeline._merge(base, _overrides(args)))


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        cmd = args.command
        if cmd == "synth":
            pipeline.stage_synth(cfg)
        elif cmd == "extract":
            pipeline.stage_extract(cfg)
        elif cmd == "prepare":
            pipeline.stage_prepare(cfg)
        elif cmd == "train":
            pipeline.stage_train(cfg, progress=_emit)
        elif cmd == "eval":
            _emit(pipeline.stage_eval(cfg))
        else:
            _emit(pipeline.stage_run(cfg, progress=_emit)["eval"])
    except ConfigError as exc:
        print(f"kpiforecast: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"kpiforecast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"kpiforecast: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
