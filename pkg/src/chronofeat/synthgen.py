"""Synthetic hour-resolution click logs with a planted, history-dependent signal.

Click probability is a logistic combination of static per-entity effects,
a per-day drift term, hour-of-day seasonality and an optional fatigue term
that depends on how often one entity was shown in the preceding hours.
Entity values follow a finite Zipf law; a fraction of values is replaced by
fresh ones every day, so cold-start rows keep appearing.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ingest import EventLog, LogSchema, parse_timestamp
from .metrics import roc_auc

_P_CLAMP = 1e-6


def _default_entities() -> dict[str, list]:
    # name -> [cardinality, zipf exponent, effect scale multiplier]
    return {
        "device_ip": [30000, 1.05, 1.0],
        "device_id": [8000, 1.1, 1.0],
        "app_id": [400, 1.2, 1.0],
        "site_id": [500, 1.2, 1.0],
        "C1": [7, 1.0, 0.3],
        "banner_pos": [5, 1.5, 0.3],
        "device_type": [4, 1.5, 0.3],
        "C14": [200, 1.1, 0.5],
    }


@dataclass
class SynthConfig:
    n_days: int = 6
    start: str = "14102100"
    rows_per_hour: float = 2000.0
    rows_dispersion: float = 0.2
    entities: dict[str, list] = field(default_factory=_default_entities)
    base_ctr: float = 0.17
    heterogeneity: float = 1.0
    churn: float = 0.15
    drift_amplitude: float = 0.15
    seasonality_amplitude: float = 0.2
    fatigue: float = 0.0
    fatigue_key: str = "device_ip"
    fatigue_window: int = 24
    seed: int = 42

    def __post_init__(self) -> None:
        if not 0 < self.base_ctr < 1:
            raise ValueError("base_ctr must be in (0, 1)")
        if self.n_days < 1 or self.rows_per_hour < 0:
            raise ValueError("n_days must be >= 1 and rows_per_hour >= 0")
        if not 0 <= self.churn <= 1:
            raise ValueError("churn must be in [0, 1]")
        for name, spec in self.entities.items():
            if len(spec) == 2:
                self.entities[name] = [int(spec[0]), float(spec[1]), 1.0]
            if int(self.entities[name][0]) < 1:
                raise ValueError(f"{name}: cardinality must be >= 1")
        if self.fatigue and self.fatigue_key not in self.entities:
            raise ValueError(f"fatigue_key {self.fatigue_key!r} is not an entity column")

    @property
    def schema(self) -> LogSchema:
        return LogSchema(categorical_columns=tuple(self.entities))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path: str | Path) -> "SynthConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def zipf_probabilities(cardinality: int, exponent: float) -> np.ndarray:
    ranks = np.arange(1, cardinality + 1, dtype=np.float64)
    w = ranks ** -exponent
    return w / w.sum()


class _Column:
    """Rank -> current value id mapping plus the static per-id effects."""

    def __init__(self, name: str, cardinality: int, exponent: float, effect_sd: float,
                 rng: np.random.Generator) -> None:
        self.name = name
        self.probs = zipf_probabilities(cardinality, exponent)
        self.cdf = np.cumsum(self.probs)
        self.cdf[-1] = 1.0
        self.effect_sd = effect_sd
        self.rank_to_id = np.arange(cardinality)
        self.next_id = cardinality
        self.effects = rng.normal(0.0, effect_sd, cardinality) if effect_sd > 0 else np.zeros(cardinality)

    def churn(self, fraction: float, rng: np.random.Generator) -> None:
        k = int(round(fraction * len(self.rank_to_id)))
        if k == 0:
            return
        ranks = rng.choice(len(self.rank_to_id), size=k, replace=False)
        new_ids = np.arange(self.next_id, self.next_id + k)
        self.next_id += k
        fresh = rng.normal(0.0, self.effect_sd, k) if self.effect_sd > 0 else np.zeros(k)
        self.effects = np.concatenate([self.effects, fresh])
        self.rank_to_id[ranks] = new_ids

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ranks = np.searchsorted(self.cdf, rng.random(n), side="right")
        return self.rank_to_id[np.minimum(ranks, len(self.cdf) - 1)]


def generate(config: SynthConfig) -> EventLog:
    """Deterministic for a given config; rows sorted by hour, stable within hour."""
    rng = np.random.default_rng(config.seed)
    names = list(config.entities)
    columns = [
        _Column(n, int(c), float(z), config.heterogeneity * float(s), rng)
        for n, (c, z, s) in config.entities.items()
    ]
    base_logit = math.log(config.base_ctr / (1 - config.base_ctr))
    drift = rng.normal(0.0, config.drift_amplitude, config.n_days) if config.drift_amplitude > 0 \
        else np.zeros(config.n_days)
    start_hour = parse_timestamp(config.start)
    fatigue_col = names.index(config.fatigue_key) if config.fatigue else None
    recent: deque[tuple[int, np.ndarray]] = deque()
    recent_counts: dict[int, int] = {}

    hours_out, ids_out, clicks_out, p_out = [], [], [], []
    values_out: list[list[np.ndarray]] = [[] for _ in names]
    clamp_count = 0
    for day in range(config.n_days):
        if day > 0 and config.churn > 0:
            for col in columns:
                col.churn(config.churn, rng)
        for hod in range(24):
            h = start_hour + day * 24 + hod
            lam = config.rows_per_hour
            if config.rows_dispersion > 0 and lam > 0:
                k = 1.0 / config.rows_dispersion ** 2
                lam = rng.gamma(k, lam / k)
            n = int(rng.poisson(lam))
            logit = np.full(n, base_logit + drift[day]
                            + config.seasonality_amplitude * math.sin(2 * math.pi * (hod - 6) / 24))
            drawn = []
            for col in columns:
                ids = col.draw(n, rng)
                drawn.append(ids)
                logit += col.effects[ids]
            if fatigue_col is not None:
                while recent and recent[0][0] <= h - config.fatigue_window:
                    _, old = recent.popleft()
                    for v in old.tolist():
                        recent_counts[v] -= 1
                seen = np.array([recent_counts.get(v, 0) for v in drawn[fatigue_col].tolist()], dtype=np.float64)
                logit -= config.fatigue * np.log1p(seen)
            p = 1.0 / (1.0 + np.exp(-logit))
            low, high = p < _P_CLAMP, p > 1 - _P_CLAMP
            clamp_count += int(low.sum() + high.sum())
            p = np.clip(p, _P_CLAMP, 1 - _P_CLAMP)
            clicks = (rng.random(n) < p).astype(np.uint8)
            if fatigue_col is not None:
                ids = drawn[fatigue_col]
                recent.append((h, ids))
                for v in ids.tolist():
                    recent_counts[v] = recent_counts.get(v, 0) + 1
            hours_out.append(np.full(n, h, dtype=np.int64))
            clicks_out.append(clicks)
            p_out.append(p)
            for j, ids in enumerate(drawn):
                values_out[j].append(ids)

    hours = np.concatenate(hours_out) if hours_out else np.zeros(0, np.int64)
    n_total = len(hours)
    cats = {}
    for j, name in enumerate(names):
        ids = np.concatenate(values_out[j]) if values_out[j] else np.zeros(0, np.int64)
        col = np.empty(n_total, dtype=object)
        col[:] = [f"{name}_{v}" for v in ids.tolist()]
        cats[name] = col
    log = EventLog(
        schema=config.schema,
        row_ids=np.arange(n_total, dtype=np.uint64) + np.uint64(10_000_000_000),
        hours=hours,
        clicks=np.concatenate(clicks_out) if clicks_out else np.zeros(0, np.uint8),
        cats=cats,
        true_p=np.concatenate(p_out) if p_out else np.zeros(0),
    )
    log.meta = {"clamp_count": clamp_count}
    return log


def ground_truth_auc(config: SynthConfig, events: EventLog) -> float:
    """ROC AUC of the generating probabilities against the drawn labels."""
    p = events.true_p
    if p is None:
        regen = generate(config)
        if not np.array_equal(regen.row_ids, events.row_ids):
            raise ValueError("events were not produced by this config")
        p = regen.true_p
    return roc_auc(p, events.clicks)
