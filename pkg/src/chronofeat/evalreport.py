"""Design-grid sweep driver and report generation.

Each grid cell (fold x length tuple x shape x te flag x event N) gets its
own directory holding validation/test prediction files and a metrics JSON.
Reports are recomputed from the prediction files only, so regenerating
them from an unchanged results directory is byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .featurize import SpecGrid, expected_feature_count, featurize_fold
from .folds import FoldAssignment, build_fold
from .ingest import EventLog
from .learner import (
    LearnerConfig,
    external_exchange,
    fit,
    predict_proba,
    write_predictions,
)
from .matrix import FeatureMatrix, read_matrix, write_matrix
from .metrics import align_by_row_id, bootstrap_ci_folds, pr_auc, roc_auc
from .te import te_cache_matrix
from .timeagg import DEFAULT_ENTITY_KEYS, WindowSpec

logger = logging.getLogger(__name__)

TE_ONLY = "none"
BASELINE_DEFAULT = "trailing:1,6,24,48,168"
SIGN_TOLERANCE = 1e-5


@dataclass(frozen=True, order=True)
class CellKey:
    lengths: tuple[int, ...]
    shape: str
    te: bool
    event_n: int
    fold: str = ""

    @property
    def spec_label(self) -> str:
        if self.shape == TE_ONLY:
            return TE_ONLY
        label = f"{self.shape}:{','.join(map(str, self.lengths))}"
        if self.shape == "event50":
            label += f"@{self.event_n}"
        return label

    @property
    def config(self) -> tuple:
        """Key without the fold: identifies one window design."""
        return (self.lengths, self.shape, self.te, self.event_n)

    def dirname(self) -> str:
        lengths = "-".join(map(str, self.lengths)) or "0"
        return f"{self.fold}__te-{'on' if self.te else 'off'}__{self.shape}__{lengths}__n{self.event_n}"

    @classmethod
    def from_dirname(cls, name: str) -> "CellKey":
        fold, te, shape, lengths, n = name.split("__")
        lengths_t = tuple(int(x) for x in lengths.split("-")) if lengths != "0" else ()
        return cls(lengths_t, shape, te == "te-on", int(n[1:]), fold)

    def window_spec(self) -> WindowSpec | None:
        if self.shape == TE_ONLY:
            return None
        return WindowSpec(self.lengths, self.shape, event_n=self.event_n)


def parse_baseline(text: str, te: bool = True, event_n: int = 50) -> tuple:
    """``trailing:1,6,24,48,168`` or ``none`` -> config tuple."""
    text = text.strip()
    if text == TE_ONLY:
        return ((), TE_ONLY, True, event_n)
    n = event_n
    if "@" in text:
        text, _, n_text = text.partition("@")
        n = int(n_text)
    spec = WindowSpec.parse(text)
    return (spec.lengths, spec.shape, te, n)


def grid_cells(grid: SpecGrid, fold_labels: Sequence[str]) -> list[CellKey]:
    default_n = WindowSpec((1,)).event_n
    keys: list[CellKey] = []
    for spec, te_on in grid.specs():
        for fold in fold_labels:
            if spec is None:
                key = CellKey((), TE_ONLY, True, default_n, fold)
            else:
                key = CellKey(spec.lengths, spec.shape, te_on, spec.event_n, fold)
            if key not in keys:
                keys.append(key)
    return keys


# ---------------------------------------------------------------------------
# sweep execution

_WORKER: dict = {}


def _init_worker(log, folds, te_cache, learner, entity_keys, out_dir) -> None:
    _WORKER.update(log=log, folds=folds, te_cache=te_cache, learner=learner,
                   entity_keys=entity_keys, out_dir=out_dir)


def _run_cell_worker(key: CellKey) -> dict:
    w = _WORKER
    return run_cell(key, w["log"], w["folds"][key.fold], w["te_cache"], w["learner"],
                    w["entity_keys"], Path(w["out_dir"]))


def run_cell(key: CellKey, log: EventLog, fold: FoldAssignment, te_cache: FeatureMatrix | None,
             learner: LearnerConfig, entity_keys: Sequence[str], out_dir: Path) -> dict:
    cell_dir = out_dir / "cells" / key.dirname()
    metrics_path = cell_dir / "metrics.json"
    if metrics_path.exists():
        return {"key": key, "status": "cached"}
    cell_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        spec = key.window_spec()
        matrix = featurize_fold(log, fold, spec, key.te, te_cache if key.te else None, entity_keys)
        expected = expected_feature_count(spec, key.te, len(log.schema.categorical_columns), len(entity_keys))
        if matrix.n_cols != expected:
            raise AssertionError(f"{matrix.n_cols} columns, expected {expected}")
        train, val, test = matrix.split("train"), matrix.split("val"), matrix.split("test")
        if learner.model == "external":
            scores = external_exchange(train, val, test, cell_dir / "exchange")
            if scores is None:
                return {"key": key, "status": "pending"}
            val_scores, test_scores, best_epoch = scores["val"], scores["test"], -1
        else:
            model = fit(train, val, learner)
            val_scores, test_scores = predict_proba(model, val), predict_proba(model, test)
            best_epoch = model.best_epoch
        write_predictions(cell_dir / "predictions_val.csv", val.row_ids, val_scores, val.labels)
        write_predictions(cell_dir / "predictions_test.csv", test.row_ids, test_scores, test.labels)
        metrics = {
            "fold": key.fold, "lengths": list(key.lengths), "shape": key.shape, "te": key.te,
            "event_n": key.event_n, "n_features": matrix.n_cols, "best_epoch": best_epoch,
            "val_roc_auc": roc_auc(val_scores, val.labels), "val_pr_auc": pr_auc(val_scores, val.labels),
            "test_roc_auc": roc_auc(test_scores, test.labels), "test_pr_auc": pr_auc(test_scores, test.labels),
        }
        (cell_dir / "timing.json").write_text(json.dumps({"runtime_s": time.perf_counter() - t0}) + "\n")
        metrics_path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        (cell_dir / "error.txt").unlink(missing_ok=True)
        return {"key": key, "status": "done"}
    except Exception as exc:  # recorded, sweep continues
        (cell_dir / "error.txt").write_text(traceback.format_exc())
        logger.error("cell %s failed: %s", key.dirname(), exc)
        return {"key": key, "status": "failed", "error": str(exc)}


def run_sweep(log: EventLog, grid: SpecGrid, learner: LearnerConfig, out_dir: str | Path,
              entity_keys: Sequence[str] = DEFAULT_ENTITY_KEYS, jobs: int = 1) -> list[dict]:
    """Execute every grid cell not already on disk; returns per-cell status."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    folds = {}
    for k in grid.folds:
        f = build_fold(log, k)
        folds[f.fold_id] = f
    keys = grid_cells(grid, list(folds))
    pending = [k for k in keys if not (out / "cells" / k.dirname() / "metrics.json").exists()]
    te_cache = None
    if pending and any(k.te for k in pending):
        cache_path = out / "te_cache.fmx"
        if cache_path.exists():
            te_cache = read_matrix(cache_path)
        else:
            te_cache = te_cache_matrix(log)
            write_matrix(te_cache, cache_path)
    statuses = [{"key": k, "status": "cached"} for k in keys if k not in pending]
    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=(log, folds, te_cache, learner, tuple(entity_keys), str(out))) as ex:
            statuses += list(ex.map(_run_cell_worker, pending))
    else:
        for k in pending:
            logger.info("cell %s", k.dirname())
            statuses.append(run_cell(k, log, folds[k.fold], te_cache, learner, entity_keys, out))
    write_sweep_results(out)
    return sorted(statuses, key=lambda s: keys.index(s["key"]))


# ---------------------------------------------------------------------------
# loading results


@dataclass
class CellResult:
    key: CellKey
    n_features: int
    best_epoch: int
    val: tuple[np.ndarray, np.ndarray, np.ndarray]  # row_ids, scores, labels
    test: tuple[np.ndarray, np.ndarray, np.ndarray]

    def metric(self, split: str, name: str) -> float:
        _, s, y = getattr(self, split)
        return roc_auc(s, y) if name == "roc_auc" else pr_auc(s, y)


def _read_pred_file(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ids, scores, labels = [], [], []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            ids.append(int(rec["row_id"]))
            scores.append(float(rec["score"]))
            labels.append(int(rec["label"]))
    return np.array(ids, dtype=np.uint64), np.array(scores), np.array(labels, dtype=np.int64)


def load_results(results_dir: str | Path) -> list[CellResult]:
    cells_dir = Path(results_dir) / "cells"
    out = []
    if not cells_dir.exists():
        return out
    for d in sorted(cells_dir.iterdir()):
        mpath = d / "metrics.json"
        if not mpath.exists():
            continue
        meta = json.loads(mpath.read_text())
        out.append(CellResult(
            key=CellKey.from_dirname(d.name),
            n_features=int(meta["n_features"]),
            best_epoch=int(meta["best_epoch"]),
            val=_read_pred_file(d / "predictions_val.csv"),
            test=_read_pred_file(d / "predictions_test.csv"),
        ))
    return out


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, rows: list[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


SWEEP_COLUMNS = ("fold", "lengths", "shape", "te", "event_n", "n_features", "best_epoch",
                 "val_roc_auc", "val_pr_auc", "test_roc_auc", "test_pr_auc")


def sweep_rows(results: Iterable[CellResult]) -> list[dict]:
    rows = []
    for r in results:
        rows.append({
            "fold": r.key.fold, "lengths": ",".join(map(str, r.key.lengths)), "shape": r.key.shape,
            "te": "on" if r.key.te else "off", "event_n": r.key.event_n, "n_features": r.n_features,
            "best_epoch": r.best_epoch,
            "val_roc_auc": r.metric("val", "roc_auc"), "val_pr_auc": r.metric("val", "pr_auc"),
            "test_roc_auc": r.metric("test", "roc_auc"), "test_pr_auc": r.metric("test", "pr_auc"),
        })
    return rows


def write_sweep_results(results_dir: Path) -> None:
    results = load_results(results_dir)
    _write_csv(results_dir / "sweep_results.csv", sweep_rows(results), SWEEP_COLUMNS)
    timing = []
    for r in results:
        tpath = results_dir / "cells" / r.key.dirname() / "timing.json"
        if tpath.exists():
            timing.append({"cell": r.key.dirname(), "runtime_s": json.loads(tpath.read_text())["runtime_s"]})
    _write_csv(results_dir / "timings.csv", timing, ("cell", "runtime_s"))


# ---------------------------------------------------------------------------
# reports


def _by_config(results: Iterable[CellResult]) -> dict[tuple, dict[str, CellResult]]:
    out: dict[tuple, dict[str, CellResult]] = {}
    for r in results:
        out.setdefault(r.key.config, {})[r.key.fold] = r
    return out


def _paired(a: CellResult, b: CellResult):
    """Test scores of ``b`` joined onto ``a``'s row order."""
    ids_a, sa, ya = a.test
    try:
        sa, sb = align_by_row_id(ids_a, sa, b.test[0], b.test[1])
    except ValueError:
        raise ValueError(f"row-set mismatch between {a.key.dirname()} and {b.key.dirname()}") from None
    return sa, sb, ya


def _config_label(cfg: tuple) -> str:
    return CellKey(*cfg).spec_label


def paired_comparison(spec: dict[str, CellResult], base: dict[str, CellResult], metric: str = "roc_auc",
                      B: int = 200, seed: int = 42, with_ci: bool = True) -> dict:
    folds = sorted(spec)
    missing = [f for f in folds if f not in base]
    if missing:
        raise KeyError(f"reference missing for fold(s) {missing}")
    f = roc_auc if metric == "roc_auc" else pr_auc
    triples = [_paired(spec[k], base[k]) for k in folds]
    deltas = {k: f(sa, y) - f(sb, y) for k, (sa, sb, y) in zip(folds, triples)}
    row = {f"delta_{k}": deltas[k] for k in folds}
    row["mean_delta"] = float(np.mean([deltas[k] for k in folds]))
    if with_ci:
        if all(np.array_equal(sa, sb) for sa, sb, _ in triples):
            row["ci_low"], row["ci_high"] = 0.0, 0.0
        else:
            row["ci_low"], row["ci_high"] = bootstrap_ci_folds(triples, B=B, seed=seed, metric=metric)
    return row


def absolute_metrics(results: list[CellResult]) -> list[dict]:
    rows = []
    for cfg, by_fold in sorted(_by_config(results).items()):
        row = {"spec": _config_label(cfg), "te": "on" if cfg[2] else "off"}
        for metric in ("roc_auc", "pr_auc"):
            vals = []
            for fold in sorted(by_fold):
                v = by_fold[fold].metric("test", metric)
                row[f"test_{metric}_{fold}"] = v
                vals.append(v)
            row[f"test_{metric}_mean"] = float(np.mean(vals))
        rows.append(row)
    return rows


def league_table(results: list[CellResult], baseline: tuple, metric: str = "roc_auc",
                 B: int = 200, seed: int = 42) -> list[dict]:
    """Specs with the baseline's te flag ranked by mean paired delta vs the baseline."""
    configs = _by_config(results)
    if baseline not in configs:
        raise KeyError(f"baseline {_config_label(baseline)} (te={'on' if baseline[2] else 'off'}) not in results")
    base = configs[baseline]
    rows = []
    for cfg, by_fold in sorted(configs.items()):
        if cfg[2] != baseline[2]:
            continue
        row = {"spec": _config_label(cfg), "te": "on" if cfg[2] else "off"}
        row.update(paired_comparison(by_fold, base, metric, B, seed))
        rows.append(row)
    rows.sort(key=lambda r: (-r["mean_delta"], r["spec"]))
    for i, r in enumerate(rows, 1):
        r["rank"] = i
    return rows


def traffic_light(results: list[CellResult], tolerance: float = SIGN_TOLERANCE) -> list[dict]:
    """Sign of the mean test ROC AUC delta of each shape vs trailing with the same tuple."""
    configs = _by_config(results)
    rows = []
    for cfg, by_fold in sorted(configs.items()):
        lengths, shape, te, n = cfg
        if shape in ("trailing", TE_ONLY):
            continue
        ref_cfg = next((c for c in configs if c[0] == lengths and c[1] == "trailing" and c[2] == te), None)
        if ref_cfg is None:
            raise KeyError(f"no trailing reference for tuple {lengths} te={te}")
        d = paired_comparison(by_fold, configs[ref_cfg], with_ci=False)["mean_delta"]
        sign = "0" if abs(d) <= tolerance else ("+" if d > 0 else "-")
        rows.append({"lengths": ",".join(map(str, lengths)), "shape": shape, "event_n": n,
                     "te": "on" if te else "off", "mean_delta": d, "sign": sign})
    return rows


def te_uplift(results: list[CellResult]) -> list[dict]:
    """Mean test metric of te=on minus te=off, matched on fold, tuple, shape and N."""
    configs = _by_config(results)
    rows = []
    for cfg, on in sorted(configs.items()):
        lengths, shape, te, n = cfg
        if not te or shape == TE_ONLY:
            continue
        off_cfg = (lengths, shape, False, n)
        if off_cfg not in configs:
            raise KeyError(f"unmatched te pair for {_config_label(cfg)}")
        off = configs[off_cfg]
        if sorted(on) != sorted(off):
            raise KeyError(f"unmatched folds for te pair {_config_label(cfg)}")
        row = {"lengths": ",".join(map(str, lengths)), "shape": shape, "event_n": n}
        for metric in ("roc_auc", "pr_auc"):
            row[f"uplift_{metric}"] = paired_comparison(on, off, metric, with_ci=False)["mean_delta"]
        rows.append(row)
    return rows


def te_lift(results: list[CellResult], B: int = 200, seed: int = 42) -> list[dict]:
    """Paired lift of each te=on window spec over the target-encoding-only cell."""
    configs = _by_config(results)
    base_cfg = next((c for c in configs if c[1] == TE_ONLY), None)
    if base_cfg is None:
        return []
    rows = []
    for cfg, by_fold in sorted(configs.items()):
        if not cfg[2] or cfg[1] == TE_ONLY:
            continue
        row = {"spec": _config_label(cfg)}
        for metric in ("roc_auc", "pr_auc"):
            comp = paired_comparison(by_fold, configs[base_cfg], metric, B, seed)
            row.update({f"{metric}_{k}": v for k, v in comp.items()})
        rows.append(row)
    return rows


def event_n_sweep(results: list[CellResult], lengths: tuple[int, ...] = (1, 6, 24, 48, 168)) -> list[dict]:
    rows = []
    for r in results:
        k = r.key
        if k.shape == "event50" and k.te and k.lengths == tuple(lengths):
            rows.append({"event_n": k.event_n, "fold": k.fold,
                         "val_roc_auc": r.metric("val", "roc_auc"), "val_pr_auc": r.metric("val", "pr_auc"),
                         "test_roc_auc": r.metric("test", "roc_auc"), "test_pr_auc": r.metric("test", "pr_auc")})
    rows.sort(key=lambda r: (r["event_n"], r["fold"]))
    return rows


def write_reports(results_dir: str | Path, out_dir: str | Path, baseline: str = BASELINE_DEFAULT,
                  B: int = 200, seed: int = 42) -> dict:
    results = load_results(results_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index: dict = {"bootstrap": {"method": "paired percentile bootstrap over test rows",
                                 "B": B, "seed": seed, "level": 0.95},
                   "baseline": baseline, "n_cells": len(results), "files": {}, "skipped": {}}

    def emit(name: str, rows: list[dict], columns: Sequence[str] | None = None) -> None:
        cols = list(columns or (rows[0].keys() if rows else []))
        _write_csv(out / name, rows, cols)
        index["files"][name] = len(rows)

    emit("sweep_results.csv", sweep_rows(results), SWEEP_COLUMNS)
    emit("absolute_metrics.csv", absolute_metrics(results))
    try:
        base = parse_baseline(baseline)
        league = league_table(results, base, B=B, seed=seed)
        fold_cols = sorted({c for r in league for c in r if c.startswith("delta_")})
        emit("league_table.csv", league,
             ["rank", "spec", "te", *fold_cols, "mean_delta", "ci_low", "ci_high"])
    except KeyError as exc:
        index["skipped"]["league_table.csv"] = str(exc)
    for name, fn in (("traffic_light.csv", traffic_light), ("te_uplift.csv", te_uplift)):
        try:
            emit(name, fn(results))
        except KeyError as exc:
            index["skipped"][name] = str(exc)
    emit("te_lift.csv", te_lift(results, B=B, seed=seed))
    emit("event_n_sweep.csv", event_n_sweep(results))
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index
