"""Command-line entry point.

Every subcommand accepts ``--config <json>``; values resolve as
flags > config file > defaults, and the ``CHRONOFEAT_SEED`` environment
variable replaces the built-in seed default.  Each run writes a manifest
next to its primary output.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import resource
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .evalreport import BASELINE_DEFAULT, run_sweep, write_reports
from .featurize import SpecGrid, expected_feature_count, featurize_fold
from .folds import build_fold, parse_fold_id, write_split_report
from .ingest import LogSchema, day_label, log_stats, read_log, sample_csv
from .learner import LearnerConfig
from .matrix import read_matrix, write_matrix
from .metrics import eda_ctr_by_day, eda_unseen_rate, evaluate
from .synthgen import SynthConfig, generate, ground_truth_auc
from .te import te_cache_matrix
from .timeagg import DEFAULT_ENTITY_KEYS, WindowSpec

logger = logging.getLogger("chronofeat")

SEED_ENV = "CHRONOFEAT_SEED"


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    seeds: dict[str, int] = field(default_factory=dict)
    wall_time_s: float = 0.0
    peak_rss_mb: float = 0.0

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _peak_rss_mb() -> float:
    # ru_maxrss is KiB on Linux, bytes on macOS
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return rss / (1 << 20) if sys.platform == "darwin" else rss / 1024


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit 2 with usage, as argparse does, but keep the format uniform
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


_DEFAULTS: dict[str, dict[str, Any]] = {}


def _opt(p: argparse.ArgumentParser, cmd: str, flag: str, default: Any = None, **kw) -> None:
    """Register a flag whose argparse default is None so config files can fill gaps."""
    dest = flag.lstrip("-").replace("-", "_")
    _DEFAULTS.setdefault(cmd, {})[dest] = default
    help_text = kw.pop("help", "")
    if default is not None:
        help_text += f" (default: {default})"
    p.add_argument(flag, dest=dest, default=None, help=help_text, **kw)


def _resolve(cmd: str, args: argparse.Namespace) -> dict:
    config: dict = {}
    if cmd == "synth" and getattr(args, "config", None):
        # for synth, --config names the generator config itself
        config = {"synth_config": args.config}
    elif getattr(args, "config", None):
        config = json.loads(Path(args.config).read_text())
        if not isinstance(config, dict):
            raise UsageError("--config must contain a JSON object")
        unknown = set(config) - set(_DEFAULTS[cmd])
        if unknown:
            raise UsageError(f"unknown config key(s) for {cmd}: {sorted(unknown)}")
    out = {}
    for dest, default in _DEFAULTS[cmd].items():
        value = getattr(args, dest, None)
        if value is None:
            value = config.get(dest)
        if value is None and dest == "seed":
            value = _env_seed()
        if value is None:
            value = default
        out[dest] = value
    return out


def _require(cfg: dict, *names: str) -> None:
    missing = [n for n in names if cfg.get(n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _schema(cfg: dict) -> LogSchema:
    return LogSchema.load(cfg["schema"]) if cfg.get("schema") else LogSchema()


def _csv_list(text: str | list | tuple) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(x) for x in text]
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _entity_keys(cfg: dict) -> tuple[str, ...]:
    return tuple(_csv_list(cfg["entity_keys"])) if cfg.get("entity_keys") else DEFAULT_ENTITY_KEYS


def _on_off(value) -> bool:
    if isinstance(value, bool):
        return value
    v = str(value).lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise UsageError(f"expected on/off, got {value!r}")


# ---------------------------------------------------------------------------
# commands; each returns (manifest path, inputs, seeds)


def cmd_sample(cfg: dict):
    _require(cfg, "input", "output")
    rate = int(cfg["rate"])
    with open(cfg["input"], newline="") as src, open(cfg["output"], "w", newline="") as dst:
        n_in, n_out = sample_csv(src, dst, rate, cfg["id_column"])
    logger.info("kept %d of %d rows (%.4f)", n_out, n_in, n_out / n_in if n_in else 0.0)
    return f"{cfg['output']}.manifest.json", [cfg["input"]], {}


def cmd_stats(cfg: dict):
    _require(cfg, "input", "out")
    stats = log_stats(read_log(cfg["input"], _schema(cfg)))
    stats.write_csv(cfg["out"])
    if stats.partial_final_day:
        logger.warning("final day is partial")
    return f"{cfg['out']}.manifest.json", [cfg["input"], cfg.get("schema")], {}


def cmd_splits(cfg: dict):
    _require(cfg, "input", "report")
    log = read_log(cfg["input"], _schema(cfg))
    folds = [build_fold(log, parse_fold_id(f)) for f in _csv_list(cfg["folds"])]
    sample = cfg.get("sample") or Path(cfg["input"]).stem
    write_split_report(folds, cfg["report"], sample)
    return f"{cfg['report']}.manifest.json", [cfg["input"], cfg.get("schema")], {}


def cmd_te(cfg: dict):
    _require(cfg, "input", "out")
    log = read_log(cfg["input"], _schema(cfg))
    matrix = te_cache_matrix(log, a=float(cfg["prior_a"]), b=float(cfg["prior_b"]), m=float(cfg["m"]))
    write_matrix(matrix, cfg["out"])
    return f"{cfg['out']}.manifest.json", [cfg["input"], cfg.get("schema")], {}


def cmd_featurize(cfg: dict):
    _require(cfg, "input", "fold", "out")
    log = read_log(cfg["input"], _schema(cfg))
    fold = build_fold(log, parse_fold_id(str(cfg["fold"])))
    te_on = _on_off(cfg["te"])
    spec = None
    if cfg["shape"] != "none":
        lengths = tuple(int(x) for x in _csv_list(cfg["lengths"]))
        spec = WindowSpec(lengths, cfg["shape"], event_n=int(cfg["event_n"]))
    cache = read_matrix(cfg["te_cache"]) if te_on and cfg.get("te_cache") else None
    keys = _entity_keys(cfg)
    matrix = featurize_fold(log, fold, spec, te_on, cache, keys)
    expected = expected_feature_count(spec, te_on, len(log.schema.categorical_columns), len(keys))
    if matrix.n_cols != expected:
        raise RuntimeError(f"produced {matrix.n_cols} columns, expected {expected}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fmt = cfg["format"]
    if fmt not in ("fmx", "csv"):
        raise UsageError("--format must be fmx or csv")
    for split in ("train", "val", "test"):
        part = matrix.split(split)
        if fmt == "fmx":
            write_matrix(part, out / f"{split}.fmx")
        else:
            part.write_csv(out / f"{split}.csv")
    logger.info("fold %s: %d rows x %d columns", fold.fold_id, matrix.n_rows, matrix.n_cols)
    return out / "manifest.json", [cfg["input"], cfg.get("schema"), cfg.get("te_cache")], {}


def cmd_synth(cfg: dict):
    _require(cfg, "out")
    base = json.loads(Path(cfg["synth_config"]).read_text()) if cfg.get("synth_config") else {}
    if cfg.get("seed") is not None and (cfg.get("_seed_from_flag") or "seed" not in base):
        base["seed"] = int(cfg["seed"])
    for key in ("n_days", "rows_per_hour"):
        if cfg.get(key) is not None:
            base[key] = type(getattr(SynthConfig(), key))(cfg[key])
    config = SynthConfig.from_dict(base)
    log = generate(config)
    log.write_csv(cfg["out"])
    config.schema.save(f"{cfg['out']}.schema.json")
    cfg["resolved_synth_config"] = config.to_dict()
    logger.info("%d rows, clamp count %d, ground-truth ROC AUC %.4f", len(log),
                log.meta["clamp_count"], ground_truth_auc(config, log) if len(log) else float("nan"))
    return f"{cfg['out']}.manifest.json", [cfg.get("synth_config")], {"synth": config.seed}


def _load_grid(path: str | None) -> tuple[SpecGrid, dict]:
    if not path:
        return SpecGrid(), {}
    d = json.loads(Path(path).read_text())
    learner = d.get("learner", {}) or {}
    return SpecGrid.from_dict(d), learner


def cmd_sweep(cfg: dict):
    _require(cfg, "input", "out")
    log = read_log(cfg["input"], _schema(cfg))
    grid, learner_block = _load_grid(cfg.get("grid"))
    if cfg.get("seed") is not None and (cfg.get("_seed_from_flag") or "seed" not in learner_block):
        learner_block = {**learner_block, "seed": int(cfg["seed"])}
    learner = LearnerConfig.from_dict(learner_block)
    cfg["resolved_grid"] = grid.to_dict()
    cfg["resolved_learner"] = learner.to_dict()
    statuses = run_sweep(log, grid, learner, cfg["out"], _entity_keys(cfg), int(cfg["jobs"]))
    counts: dict[str, int] = {}
    for s in statuses:
        counts[s["status"]] = counts.get(s["status"], 0) + 1
    logger.info("sweep cells: %s", ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    if counts.get("failed"):
        logger.error("%d cell(s) failed; see error.txt in their directories", counts["failed"])
    out = Path(cfg["out"])
    return out / "manifest.json", [cfg["input"], cfg.get("schema"), cfg.get("grid")], {"learner": learner.seed}


def cmd_report(cfg: dict):
    _require(cfg, "results", "out")
    seed = int(cfg["seed"])
    index = write_reports(cfg["results"], cfg["out"], cfg["baseline"], B=int(cfg["bootstrap_b"]), seed=seed)
    for name, why in index["skipped"].items():
        logger.warning("skipped %s: %s", name, why)
    sweep_csv = Path(cfg["results"]) / "sweep_results.csv"
    return Path(cfg["out"]) / "manifest.json", [sweep_csv if sweep_csv.exists() else None], {"bootstrap": seed}


def _read_scores(path: str) -> dict[int, float]:
    with open(path, newline="") as fh:
        return {int(r["row_id"]): float(r["score"]) for r in csv.DictReader(fh)}


def _read_labels(path: str, schema: LogSchema) -> dict[int, int]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        if "row_id" in fields and "label" in fields:
            id_col, y_col = "row_id", "label"
        elif schema.id_column in fields and schema.label_column in fields:
            id_col, y_col = schema.id_column, schema.label_column
        else:
            raise UsageError(f"{path}: need row_id,label or {schema.id_column},{schema.label_column} columns")
        return {int(r[id_col]): int(r[y_col]) for r in reader}


def cmd_eval(cfg: dict):
    _require(cfg, "pred", "labels", "out")
    scores = _read_scores(cfg["pred"])
    labels = _read_labels(cfg["labels"], _schema(cfg))
    missing = [r for r in scores if r not in labels]
    if missing:
        raise ValueError(f"{len(missing)} predicted row_id(s) have no label, e.g. {missing[0]}")
    ids = sorted(scores)
    result = evaluate(np.array([scores[i] for i in ids]), np.array([labels[i] for i in ids]))
    Path(cfg["out"]).write_text(json.dumps(asdict(result), indent=2, sort_keys=True) + "\n")
    return f"{cfg['out']}.manifest.json", [cfg["pred"], cfg["labels"], cfg.get("schema")], {}


def cmd_eda(cfg: dict):
    _require(cfg, "input", "out")
    log = read_log(cfg["input"], _schema(cfg))
    columns = _csv_list(cfg["columns"]) if cfg.get("columns") else list(_entity_keys(cfg))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ctr_by_day.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["day", "click_rate"])
        for d, ctr in eda_ctr_by_day(log):
            w.writerow([day_label(d), repr(ctr)])
    with open(out / "unseen_rate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["column", "day", "unseen_rate"])
        for col, series in eda_unseen_rate(log, columns).items():
            for d, rate in series:
                w.writerow([col, day_label(d), repr(rate)])
    return out / "manifest.json", [cfg["input"], cfg.get("schema")], {}


COMMANDS: dict[str, tuple[Callable, str]] = {
    "sample": (cmd_sample, "deterministic hash sampling of a CSV log"),
    "stats": (cmd_stats, "per-day row counts and click rates"),
    "splits": (cmd_splits, "rolling-tail fold ranges and split statistics"),
    "te": (cmd_te, "build the target-encoding cache matrix"),
    "featurize": (cmd_featurize, "feature matrices for one fold and window spec"),
    "synth": (cmd_synth, "generate a synthetic click log"),
    "sweep": (cmd_sweep, "run the design-grid sweep"),
    "eval": (cmd_eval, "ROC AUC and PR AUC of a predictions file"),
    "report": (cmd_report, "summary tables from a sweep results directory"),
    "eda": (cmd_eda, "CTR by day and unseen-value rates"),
}


def build_parser() -> argparse.ArgumentParser:
    _DEFAULTS.clear()
    parser = _Parser(prog="chronofeat", description="Leakage-safe temporal features for hourly event logs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="logging verbosity (default: INFO)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    ps = {name: sub.add_parser(name, help=text, description=text) for name, (_, text) in COMMANDS.items()}
    for name, p in ps.items():
        if name == "synth":
            p.add_argument("--config", help="synthetic generator JSON config; --seed, --n-days and "
                                            "--rows-per-hour override its values")
        else:
            p.add_argument("--config", help="JSON file of option values; flags take precedence")

    schema_help = "JSON log schema (default: Avazu layout)"
    for name in ("stats", "splits", "te", "featurize", "sweep", "eval", "eda"):
        _opt(ps[name], name, "--schema", help=schema_help)

    p = ps["sample"]
    _opt(p, "sample", "--input", help="input CSV")
    _opt(p, "sample", "--output", help="output CSV")
    _opt(p, "sample", "--rate", 10, type=int, help="percent of rows to keep, 0..100")
    _opt(p, "sample", "--id-column", "id", help="column whose text is hashed")

    _opt(ps["stats"], "stats", "--input", help="input CSV")
    _opt(ps["stats"], "stats", "--out", help="per-day statistics CSV")

    p = ps["splits"]
    _opt(p, "splits", "--input", help="input CSV")
    _opt(p, "splits", "--folds", "A,B", help="comma list of fold ids (A, B, ...) or offsets (0, 1, ...)")
    _opt(p, "splits", "--report", help="split report CSV")
    _opt(p, "splits", "--sample", help="sample name written in the report (default: input file stem)")

    p = ps["te"]
    _opt(p, "te", "--input", help="input CSV")
    _opt(p, "te", "--out", help="TE cache matrix (.fmx)")
    _opt(p, "te", "--prior-a", 1.0, type=float, help="prior CTR pseudo-clicks")
    _opt(p, "te", "--prior-b", 10.0, type=float, help="prior CTR pseudo-non-clicks")
    _opt(p, "te", "--m", 100.0, type=float, help="target-encoding smoothing strength")

    p = ps["featurize"]
    _opt(p, "featurize", "--input", help="input CSV")
    _opt(p, "featurize", "--fold", help="fold id (A, B, ...) or offset")
    _opt(p, "featurize", "--lengths", "1,6,24,48,168", help="window lengths in hours")
    _opt(p, "featurize", "--shape", "trailing",
         choices=["trailing", "gap1", "bucket", "calendar", "event50", "none"], help="window shape")
    _opt(p, "featurize", "--te", "on", choices=["on", "off"], help="include target encoding")
    _opt(p, "featurize", "--event-n", 50, type=int, help="event-count window size")
    _opt(p, "featurize", "--te-cache", help="TE cache matrix from the te command")
    _opt(p, "featurize", "--entity-keys", ",".join(DEFAULT_ENTITY_KEYS), help="entity columns for windows")
    _opt(p, "featurize", "--format", "fmx", choices=["fmx", "csv"], help="matrix file format")
    _opt(p, "featurize", "--out", help="output directory")

    p = ps["synth"]
    _opt(p, "synth", "--synth-config", help="synthetic generator JSON config (same as --config for this command)")
    _opt(p, "synth", "--out", help="output CSV; the schema is written next to it")
    _opt(p, "synth", "--seed", type=int, help=f"generator seed (default: config, then ${SEED_ENV}, then 42)")
    _opt(p, "synth", "--n-days", type=int, help="override number of days")
    _opt(p, "synth", "--rows-per-hour", type=float, help="override mean rows per hour")

    p = ps["sweep"]
    _opt(p, "sweep", "--input", help="input CSV")
    _opt(p, "sweep", "--grid", help="grid JSON (lengths, shapes, te, event_n, folds, learner)")
    _opt(p, "sweep", "--out", help="results directory")
    _opt(p, "sweep", "--jobs", 1, type=int, help="parallel cells")
    _opt(p, "sweep", "--seed", type=int, help=f"learner seed (default: grid, then ${SEED_ENV}, then 42)")
    _opt(p, "sweep", "--entity-keys", ",".join(DEFAULT_ENTITY_KEYS), help="entity columns for windows")

    p = ps["report"]
    _opt(p, "report", "--results", help="sweep results directory")
    _opt(p, "report", "--baseline", BASELINE_DEFAULT, help="league-table baseline spec")
    _opt(p, "report", "--out", help="report directory")
    _opt(p, "report", "--bootstrap-b", 200, type=int, help="bootstrap replicates")
    _opt(p, "report", "--seed", 42, type=int, help=f"bootstrap seed (${SEED_ENV} overrides the default)")

    p = ps["eval"]
    _opt(p, "eval", "--pred", help="predictions CSV with row_id,score")
    _opt(p, "eval", "--labels", help="labels CSV with row_id,label or the raw log")
    _opt(p, "eval", "--out", help="metrics JSON")

    p = ps["eda"]
    _opt(p, "eda", "--input", help="input CSV")
    _opt(p, "eda", "--columns", help="columns for unseen rates (default: entity keys)")
    _opt(p, "eda", "--entity-keys", ",".join(DEFAULT_ENTITY_KEYS), help=argparse.SUPPRESS)
    _opt(p, "eda", "--out", help="output directory")
    return parser


_FILE_OUTPUTS = ("out", "output", "report")
_DIR_OUTPUT_COMMANDS = ("featurize", "sweep", "report", "eda")  # these create --out themselves


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _resolve(args.command, args)
        cfg["_seed_from_flag"] = getattr(args, "seed", None) is not None
        fn = COMMANDS[args.command][0]
        for key in _FILE_OUTPUTS:
            if cfg.get(key) and args.command not in _DIR_OUTPUT_COMMANDS:
                Path(cfg[key]).parent.mkdir(parents=True, exist_ok=True)
        manifest_path, inputs, seeds = fn(cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"chronofeat {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("traceback", exc_info=True)
        print(f"chronofeat {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    cfg.pop("_seed_from_flag", None)
    if args.config:
        inputs = [*inputs, args.config]
    digests = {str(p): sha256_file(p) for p in inputs if p and Path(p).is_file()}
    RunManifest(
        command=args.command,
        argv=argv,
        config=cfg,
        inputs=digests,
        seeds=seeds,
        wall_time_s=round(time.perf_counter() - t0, 3),
        peak_rss_mb=round(_peak_rss_mb(), 1),
    ).write(manifest_path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
