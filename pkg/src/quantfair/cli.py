"""Command-line front end: ``quantfair prepare|run|report|decouple``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from collections import defaultdict
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .classifiers import TrainerConfig
from .data import RECORD_FIELDS, ErrorRecord, LabeledSample, load_sample, save_sample
from .errors import ConfigError, EmptyGroupError, IngestionError, QuantFairError, SampleError
from .ingestion import SyntheticSpec, generate_synthetic, load_schema, prepare_dataset, resolve_sources
from .protocols import PROTOCOLS, ProtocolSpec, aggregate, box_stats, run_decoupling, run_protocol
from .protocols.runner import DECOUPLING_PROTOCOLS, DecouplingRecord
from .protocols.stats import TIER_MARKS
from .quantifiers import METHODS

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DECOUPLING_METHODS = ("CC", "PACC", "SLD")
log = logging.getLogger("quantfair")

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "protocols", "methods"],
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"type": "string"},
                "schema": {"type": "string"},
                "sources": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "data_dir": {"type": "string"},
                "prepared": {"type": "string"},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["n", "dim", "mean_shift"],
                    "properties": {
                        "n": {"type": "integer", "minimum": 4},
                        "dim": {"type": "integer", "minimum": 1},
                        "mean_shift": {"oneOf": [
                            {"type": "number"},
                            {"type": "array", "items": {"type": "number"}, "minItems": 4,
                             "maxItems": 4}]},
                        "cell_probs": {"type": "array", "items": {"type": "number", "minimum": 0},
                                       "minItems": 4, "maxItems": 4},
                        "seed": {"type": "integer"},
                    },
                },
            },
            "oneOf": [{"required": ["schema"]}, {"required": ["prepared"]},
                      {"required": ["synthetic"]}],
        },
        "protocols": {"type": "array", "minItems": 1, "items": {"enum": list(PROTOCOLS)}},
        "methods": {"type": "array", "minItems": 1, "items": {
            "type": "string",
            "pattern": "^(" + "|".join(METHODS) + ")(-nosD2)?$"}},
        "trainer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["logistic", "svm-platt"]},
                "l2_strength": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "laplace_pseudocount": {"type": "number", "minimum": 0},
        "scale": {"enum": ["desk", "paper"]},
        "n_splits": {"type": "integer", "minimum": 1},
        "n_repeats": {"type": "integer", "minimum": 1},
        "sample_size": {"type": "integer", "minimum": 2},
        "min_size": {"type": "integer", "minimum": 2},
        "grid": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        "k_folds": {"type": "integer", "minimum": 2},
        "base_seed": {"type": "integer"},
        "jobs": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
    },
}

SCALES = {"desk": (2, 3), "paper": (5, 10)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        cfg = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    cfg["_dir"] = str(p.resolve().parent)
    return cfg


def _data_dir(explicit, base_dir):
    if explicit:
        d = Path(explicit)
        return d if d.is_absolute() else Path(base_dir) / d
    env = os.environ.get("QF_DATA_DIR")
    if env:
        return Path(env)
    raise IngestionError("no data directory: set dataset.data_dir or QF_DATA_DIR",
                         code="dataset-missing")


def load_configured_dataset(cfg: dict):
    """Return ``(name, sample)`` for the dataset block of a config."""
    ds = cfg["dataset"]
    base = cfg.get("_dir", ".")
    if "synthetic" in ds:
        syn = ds["synthetic"]
        spec = SyntheticSpec(n=syn["n"], dim=syn["dim"],
                             mean_shift=tuple(np.atleast_1d(syn["mean_shift"]).tolist()),
                             cell_probs=tuple(syn.get("cell_probs", (0.25,) * 4)),
                             seed=syn.get("seed", 0))
        return ds.get("name", "synthetic"), generate_synthetic(spec)
    if "prepared" in ds:
        path = Path(ds["prepared"])
        path = path if path.is_absolute() else Path(base) / path
        if not path.is_file():
            raise IngestionError(f"prepared dataset {path} not found", code="dataset-missing")
        return ds.get("name", path.stem), load_sample(path)
    schema = load_schema(ds["schema"])
    data_dir = _data_dir(ds.get("data_dir"), base)
    if "sources" in ds:
        sources = [data_dir / s for s in ds["sources"]]
        absent = [str(s) for s in sources if not s.is_file()]
        if absent:
            raise IngestionError(f"data files not found: {absent}", code="dataset-missing")
    else:
        sources = resolve_sources(schema, data_dir)
    return ds.get("name", schema.name), prepare_dataset(schema, sources).sample


def protocol_specs(cfg: dict, dataset_name: str, scale=None, seed=None) -> list:
    scale = scale or cfg.get("scale", "desk")
    n_splits, n_repeats = SCALES[scale]
    trainer = TrainerConfig(**cfg.get("trainer", {}))
    from .quantifiers import QuantifierConfig
    qconf = QuantifierConfig(k_folds=cfg.get("k_folds", 10))
    specs = []
    for proto in cfg["protocols"]:
        kw = dict(methods=tuple(cfg["methods"]), n_splits=cfg.get("n_splits", n_splits),
                  n_repeats=cfg.get("n_repeats", n_repeats),
                  sample_size=cfg.get("sample_size", 500),
                  base_seed=seed if seed is not None else cfg.get("base_seed", 0),
                  dataset=dataset_name, min_size=cfg.get("min_size", 1000), trainer=trainer,
                  quantifier=qconf, laplace_pseudocount=cfg.get("laplace_pseudocount", 0.5))
        if "grid" in cfg:
            kw["grid"] = tuple(cfg["grid"])
        specs.append(ProtocolSpec(proto, **kw))
    return specs


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_records(out: Path, stem: str, records) -> None:
    write_csv(out / f"{stem}.csv", RECORD_FIELDS,
              ([getattr(r, f) for f in RECORD_FIELDS] for r in records))
    with open(out / f"{stem}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: Path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(ErrorRecord.from_dict(json.loads(line)))
    return out


AGG_HEADER = ("protocol", "dataset", "method", "n", "failures", "mae", "mae_std", "mse",
              "mse_std", "p_ae_lt_01", "p_ae_lt_02", "significance_mae", "significance_mse")


def aggregate_rows(protocol: str, records) -> list:
    rows = aggregate(records)
    return [(protocol, r.dataset, r.method, r.n, r.failures, r.mae, r.mae_std, r.mse, r.mse_std,
             r.p_ae_lt_01, r.p_ae_lt_02, r.significance, r.significance_mse) for r in rows]


def table_lines(rows) -> list:
    """Human-readable table with †/‡ markers, like the published layout."""
    lines = [f"{'method':<14}{'MAE':>16}{'MSE':>16}{'P(AE<0.1)':>11}{'P(AE<0.2)':>11}"]
    for r in rows:
        mae = f"{r[5]:.3f}{TIER_MARKS[r[11]] or ' '}±{r[6]:.3f}"
        mse = f"{r[7]:.3f}{TIER_MARKS[r[12]] or ' '}±{r[8]:.3f}"
        lines.append(f"{r[2]:<14}{mae:>16}{mse:>16}{r[9]:>11.3f}{r[10]:>11.3f}")
    return lines


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_prepare(args) -> int:
    schema = load_schema(args.schema)
    if args.input:
        sources = [Path(p) for p in args.input]
        absent = [str(p) for p in sources if not p.is_file()]
        if absent:
            raise IngestionError(f"input files not found: {absent}", code="dataset-missing")
    else:
        sources = resolve_sources(schema, _data_dir(args.data_dir, "."))
    prepared = prepare_dataset(schema, sources)
    s = prepared.sample
    out = _prepare_out(args.out)
    save_sample(s, out / f"{schema.name}.npz")
    summary = {"dataset": schema.name, "rows": len(s), "features": s.n_features,
               "pr_s1": round(s.prevalence("sensitive"), 6),
               "pr_y_pos": round(s.prevalence("target"), 6),
               "dropped_constant_columns": prepared.dropped_constant,
               "categories": prepared.categories}
    (out / f"{schema.name}_summary.json").write_text(json.dumps(summary, indent=2) + "\n",
                                                     encoding="utf-8")
    print(f"{schema.name}: rows={summary['rows']} features={summary['features']} "
          f"Pr(S=1)={summary['pr_s1']:.3f} Pr(Y=+)={summary['pr_y_pos']:.3f}")
    return EXIT_OK


def _scale_flag(args):
    return "paper" if args.paper_scale else "desk" if args.desk_scale else None


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    name, dataset = load_configured_dataset(cfg)
    specs = protocol_specs(cfg, name, _scale_flag(args), args.seed)
    out = _prepare_out(args.out or cfg.get("out", "results"))
    jobs = args.jobs or cfg.get("jobs", 1)
    agg = []
    hard = False
    for spec in specs:
        records = run_protocol(spec, dataset, jobs=jobs)
        write_records(out, f"records_{spec.protocol}", records)
        n_failed = sum(r.failed for r in records)
        print(f"{spec.protocol}: {len(records)} records, {n_failed} failed")
        try:
            rows = aggregate_rows(spec.protocol, records)
        except EmptyGroupError as exc:
            print(f"error: {exc}", file=sys.stderr)
            hard = True
            continue
        agg.extend(rows)
        for line in table_lines(rows):
            print("  " + line)
    write_csv(out / "aggregate.csv", AGG_HEADER, agg)
    return EXIT_RUNTIME if hard else EXIT_OK


BOX_HEADER = ("protocol", "dataset", "method", "grid_index", "parameter", "n", "q1", "median",
              "q3", "whisker_low", "whisker_high", "n_outliers", "outliers")


def cmd_report(args) -> int:
    src = Path(args.records)
    files = sorted(src.glob("records_*.jsonl")) if src.is_dir() else [src]
    if not files or not all(f.is_file() for f in files):
        raise IngestionError(f"no record files under {src}", code="empty-records")
    out = _prepare_out(args.out or (src if src.is_dir() else src.parent))
    box_rows, agg, lines = [], [], []
    for f in files:
        records = read_records(f)
        if not records:
            raise IngestionError(f"{f} holds no records", code="empty-records")
        groups = defaultdict(list)
        for r in records:
            if not r.failed:
                groups[(r.protocol, r.dataset, r.method, r.grid_index, r.parameter)].append(
                    r.signed_error)
        order = {m: i for i, m in enumerate(dict.fromkeys(r.method for r in records))}
        for key in sorted(groups, key=lambda k: (k[0], k[1], order[k[2]], k[3])):
            b = box_stats(groups[key])
            box_rows.append((*key, b.n, b.q1, b.median, b.q3, b.whisker_low, b.whisker_high,
                             len(b.outliers), " ".join(repr(x) for x in b.outliers)))
        by_proto = defaultdict(list)
        for r in records:
            by_proto[r.protocol].append(r)
        for proto in sorted(by_proto):
            rows = aggregate_rows(proto, by_proto[proto])
            agg.extend(rows)
            lines.append(proto)
            lines.extend("  " + l for l in table_lines(rows))
    write_csv(out / "boxplot.csv", BOX_HEADER, box_rows)
    write_csv(out / "table.csv", AGG_HEADER, agg)
    (out / "table.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


DEC_FIELDS = tuple(f.name for f in dataclasses.fields(DecouplingRecord))
DEC_SUMMARY = ("protocol", "dataset", "method", "grid_index", "parameter", "n", "mae",
               "accuracy", "f1")


def decoupling_summary(records) -> list:
    groups = defaultdict(list)
    for r in records:
        if not r.failure:
            groups[(r.protocol, r.dataset, r.method, r.grid_index, r.parameter)].append(r)
    order = {m: i for i, m in enumerate(dict.fromkeys(r.method for r in records))}
    rows = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], order[k[2]], k[3])):
        rs = groups[key]
        rows.append((*key, len(rs), float(np.mean([r.abs_error for r in rs])),
                     float(np.mean([r.accuracy for r in rs])), float(np.mean([r.f1 for r in rs]))))
    return rows


def cmd_decouple(args) -> int:
    cfg = load_config(args.config)
    bad = [m for m in cfg["methods"] if m.split("-")[0] not in DECOUPLING_METHODS]
    if bad:
        raise ConfigError(f"unsupported-method for decoupling: {bad}; use {DECOUPLING_METHODS}")
    wrong = [p for p in cfg["protocols"] if p not in DECOUPLING_PROTOCOLS]
    if wrong:
        raise ConfigError(f"decoupling needs protocols among {DECOUPLING_PROTOCOLS}, got {wrong}")
    name, dataset = load_configured_dataset(cfg)
    specs = protocol_specs(cfg, name, _scale_flag(args), args.seed)
    out = _prepare_out(args.out or cfg.get("out", "results"))
    jobs = args.jobs or cfg.get("jobs", 1)
    all_rows = []
    for spec in specs:
        records = run_decoupling(spec, dataset, jobs=jobs)
        write_csv(out / f"decoupling_records_{spec.protocol}.csv", DEC_FIELDS,
                  ([getattr(r, f) for f in DEC_FIELDS] for r in records))
        all_rows.extend(decoupling_summary(records))
    write_csv(out / "decoupling.csv", DEC_SUMMARY, all_rows)
    for row in all_rows:
        print(f"{row[0]} {row[2]:<8} p={row[4]:.2f} mae={row[6]:.3f} acc={row[7]:.3f} "
              f"f1={row[8]:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="quantfair", description="Estimate demographic disparity by quantification "
                "and run the distribution-shift benchmark protocols.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    prep = sub.add_parser("prepare", help="preprocess a dataset CSV into a .npz file")
    prep.add_argument("--schema", required=True, help="shipped schema name or YAML schema path")
    prep.add_argument("--input", nargs="+", help="CSV file(s); default: schema sources in data dir")
    prep.add_argument("--data-dir", help="dataset root (default: $QF_DATA_DIR)")
    prep.add_argument("--out", required=True)
    prep.set_defaults(func=cmd_prepare)

    for name, func, help_text in (("run", cmd_run, "run protocols and write error records"),
                                  ("decouple", cmd_decouple,
                                   "quantification error vs classification quality")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int, help="override base_seed")
        sp.add_argument("--jobs", type=int, help="worker processes")
        sp.add_argument("--out", help="output directory")
        scale = sp.add_mutually_exclusive_group()
        scale.add_argument("--desk-scale", action="store_true", help="2 splits x 3 repeats")
        scale.add_argument("--paper-scale", action="store_true", help="5 splits x 10 repeats")
        sp.set_defaults(func=func)

    rep = sub.add_parser("report", help="boxplot data and significance tables from records")
    rep.add_argument("records", help="directory of records_*.jsonl files, or one file")
    rep.add_argument("--out", help="output directory (default: the records directory)")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "jobs", None) is not None and args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, SampleError) as exc:
        print(f"data error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except QuantFairError as exc:
        if exc.code == "invalid-schema":
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        print(f"runtime error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
