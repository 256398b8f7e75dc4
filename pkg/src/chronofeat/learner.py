"""Baseline click model: L2-regularised logistic regression trained by
mini-batch SGD with validation early stopping, plus the file exchange used
to plug in an external learner.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .matrix import FeatureMatrix, write_matrix
from .metrics import METRICS

logger = logging.getLogger(__name__)

# Reference configuration for the gradient-boosted external learner.
XGBOOST_REFERENCE = {
    "objective": "binary:logistic",
    "n_estimators": 800,
    "learning_rate": 0.05,
    "max_depth": 6,
    "subsample": 0.8,
    "colsample_bytree": 0.8,
    "min_child_weight": 10.0,
    "reg_lambda": 5.0,
    "random_state": 42,
    "n_jobs": 1,
    "tree_method": "hist",
    "early_stopping_rounds": 50,
    "eval_metric": ["auc", "aucpr"],
}

_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


class ColumnMismatchError(ValueError):
    pass


class PredictionAlignmentError(ValueError):
    pass


@dataclass
class LearnerConfig:
    model: str = "logistic_sgd"
    learning_rate: float = 0.05
    l2_penalty: float = 1e-4
    max_epochs: int = 30
    batch_size: int = 512
    early_stopping_patience: int = 5
    eval_metric: str = "roc_auc"
    seed: int = 42
    missing_value_policy: str = "train_median_impute"

    def __post_init__(self) -> None:
        if self.model not in ("logistic_sgd", "external"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stopping_patience < 1:
            raise ValueError("early_stopping_patience must be >= 1")
        if self.eval_metric not in METRICS:
            raise ValueError(f"eval_metric must be one of {sorted(METRICS)}")
        if self.missing_value_policy != "train_median_impute":
            raise ValueError("only train_median_impute is supported")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class FittedModel:
    columns: tuple[str, ...]
    weights: np.ndarray
    bias: float
    center: np.ndarray
    scale: np.ndarray
    fill: np.ndarray
    best_epoch: int = 0
    history: list[float] = field(default_factory=list)

    def transform(self, values: np.ndarray) -> np.ndarray:
        X = np.asarray(values, dtype=np.float64)
        X = np.where(np.isnan(X), self.fill, X)
        return (X - self.center) / self.scale


def sigmoid(z):
    return np.clip(np.exp(-np.logaddexp(0.0, -z)), _P_LO, _P_HI)


def loss_and_grad(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float):
    """Mean log-loss + 0.5 * l2 * ||w||^2 and its gradient (w, b)."""
    z = X @ w + b
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * float(w @ w)
    r = (np.exp(-np.logaddexp(0.0, -z)) - y) / len(y)
    return float(loss), X.T @ r + l2 * w, float(r.sum())


def _preprocessing(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.asarray(values, dtype=np.float64)
    with np.errstate(all="ignore"):
        fill = np.nanmedian(X, axis=0) if len(X) else np.zeros(X.shape[1])
    fill = np.where(np.isnan(fill), 0.0, fill)
    Xf = np.where(np.isnan(X), fill, X)
    center = Xf.mean(axis=0) if len(X) else np.zeros(X.shape[1])
    scale = Xf.std(axis=0) if len(X) else np.ones(X.shape[1])
    scale = np.where(scale > 0, scale, 1.0)
    return fill, center, scale


def sgd_epochs(X: np.ndarray, y: np.ndarray, config: LearnerConfig,
               w: np.ndarray | None = None, b: float = 0.0) -> Iterator[tuple[int, np.ndarray, float]]:
    """Yield (epoch, weights, bias) after each pass; only training labels are read."""
    rng = np.random.default_rng(config.seed)
    n, k = X.shape
    w = np.zeros(k) if w is None else w.astype(np.float64).copy()
    y = y.astype(np.float64)
    lr, l2, bs = config.learning_rate, config.l2_penalty, config.batch_size
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start:start + bs]
            _, gw, gb = loss_and_grad(w, b, X[idx], y[idx], l2)
            w -= lr * gw
            b -= lr * gb
        yield epoch, w.copy(), b


def _check_labels(m: FeatureMatrix, what: str) -> None:
    if m.n_rows and not np.all((m.labels == 0) | (m.labels == 1)):
        raise ValueError(f"{what} labels must be binary")


def fit(train: FeatureMatrix, val: FeatureMatrix, config: LearnerConfig | None = None) -> FittedModel:
    config = config or LearnerConfig()
    if config.model != "logistic_sgd":
        raise ValueError("fit() trains the built-in learner; use external_exchange for external models")
    if train.column_names != val.column_names:
        raise ColumnMismatchError("train and val column names differ")
    _check_labels(train, "train")
    _check_labels(val, "val")
    if train.n_rows == 0 or train.labels.min() == train.labels.max():
        raise ValueError("training labels contain a single class")
    fill, center, scale = _preprocessing(train.values)
    model = FittedModel(train.column_names, np.zeros(train.n_cols), 0.0, center, scale, fill)
    X = model.transform(train.values)
    Xv = model.transform(val.values)
    metric = METRICS[config.eval_metric]
    best = (-np.inf, 0, model.weights, 0.0)
    for epoch, w, b in sgd_epochs(X, train.labels, config):
        score = metric(sigmoid(Xv @ w + b), val.labels)
        model.history.append(score)
        if score > best[0]:
            best = (score, epoch, w, b)
        elif epoch - best[1] >= config.early_stopping_patience:
            break
    _, model.best_epoch, model.weights, model.bias = best
    logger.debug("best epoch %d, val %s %.5f", model.best_epoch, config.eval_metric, best[0])
    return model


def predict_proba(model: FittedModel, matrix: FeatureMatrix) -> np.ndarray:
    if matrix.column_names != model.columns:
        raise ColumnMismatchError("matrix columns differ from training columns")
    return sigmoid(model.transform(matrix.values) @ model.weights + model.bias)


# ---------------------------------------------------------------------------
# external learner contract


def write_exchange(train: FeatureMatrix, val: FeatureMatrix, test: FeatureMatrix, out_dir: str | Path,
                   csv_copies: bool = True, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, m in (("train", train), ("val", val), ("test", test)):
        write_matrix(m, out / f"{name}.fmx")
        if csv_copies:
            m.write_csv(out / f"{name}.csv")
    manifest = {
        "format": "FMX1",
        "files": {s: {"fmx": f"{s}.fmx", "csv": f"{s}.csv" if csv_copies else None}
                  for s in ("train", "val", "test")},
        "columns": list(train.column_names),
        "rows": {"train": train.n_rows, "val": val.n_rows, "test": test.n_rows},
        "hyperparameters": XGBOOST_REFERENCE,
        "expects": ["predictions_val.csv", "predictions_test.csv"],
        "prediction_columns": ["row_id", "score"],
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_predictions(path: str | Path, row_ids: np.ndarray) -> np.ndarray:
    """Scores from a ``row_id,score`` CSV, joined onto ``row_ids`` order."""
    path = Path(path)
    if not path.exists():
        raise PredictionAlignmentError(f"missing predictions file {path}")
    scores: dict[int, float] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rid = int(rec["row_id"])
            if rid in scores:
                raise PredictionAlignmentError(f"{path.name}: duplicate row_id {rid}")
            scores[rid] = float(rec["score"])
    wanted = [int(r) for r in row_ids]
    missing = [r for r in wanted if r not in scores]
    if missing:
        raise PredictionAlignmentError(f"{path.name}: {len(missing)} row_id(s) missing, e.g. {missing[0]}")
    if len(scores) != len(wanted):
        raise PredictionAlignmentError(f"{path.name}: {len(scores) - len(wanted)} unexpected row_id(s)")
    return np.array([scores[r] for r in wanted])


def write_predictions(path: str | Path, row_ids: np.ndarray, scores: np.ndarray,
                      labels: np.ndarray | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "score"] + (["label"] if labels is not None else []))
        for i in range(len(row_ids)):
            rec = [int(row_ids[i]), repr(float(scores[i]))]
            if labels is not None:
                rec.append(int(labels[i]))
            w.writerow(rec)


def external_exchange(train: FeatureMatrix, val: FeatureMatrix, test: FeatureMatrix,
                      out_dir: str | Path) -> dict[str, np.ndarray] | None:
    """Write the exchange directory if needed; return val/test scores once present."""
    out = Path(out_dir)
    if not (out / "manifest.json").exists():
        write_exchange(train, val, test, out)
    if not ((out / "predictions_val.csv").exists() and (out / "predictions_test.csv").exists()):
        return None
    return {
        "val": read_predictions(out / "predictions_val.csv", val.row_ids),
        "test": read_predictions(out / "predictions_test.csv", test.row_ids),
    }
