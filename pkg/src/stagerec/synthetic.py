"""Synthetic interaction-log generator with known latent lifecycle stages.

Users carry a hidden stage (New/Wander/Stick/Loyal) that evolves day to day
via a Markov transition matrix. Each session draws user features from a
stage-shifted band, items uniformly, and task labels from the stage's
Bernoulli rates, giving ground truth for stage-detection validation. The
default numeric rates are synthetic config, chosen only to respect the
qualitative ordering (New lowest on clicks, Wander lowest on staytime, Stick
lowest on conversion, Loyal highest everywhere).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DAY_SECONDS, Dataset, StageLabel, STAGES
from .errors import ConfigError, DataValidationError


@dataclass(frozen=True)
class StageProfile:
    """Bernoulli action rates and user-feature band offsets for one stage."""

    stage: StageLabel
    rate_vector: tuple[float, ...]  # (K,) strictly inside (0,1)
    feature_shift: tuple[int, ...]  # (d1,) offsets into the user vocab

    def validate(self, k: int, d1: int) -> None:
        if len(self.rate_vector) != k:
            raise ConfigError(f"{self.stage.display()}: rate_vector must have {k} entries")
        if any(not (0.0 < r < 1.0) for r in self.rate_vector):
            raise ConfigError(
                f"{self.stage.display()}: rates must lie strictly inside (0,1), "
                f"got {self.rate_vector}"
            )
        if len(self.feature_shift) != d1:
            raise ConfigError(f"{self.stage.display()}: feature_shift must have {d1} entries")


@dataclass(frozen=True)
class TransitionMatrix:
    """4x4 row-stochastic matrix of daily stage-transition probabilities."""

    rows: tuple[tuple[float, ...], ...]

    def validate(self) -> None:
        if len(self.rows) != 4 or any(len(r) != 4 for r in self.rows):
            raise ConfigError("transition matrix must be 4x4")
        for i, row in enumerate(self.rows):
            if any(p < 0 for p in row):
                raise ConfigError(f"transition row {i} has a negative entry")
            if abs(sum(row) - 1.0) > 1e-9:
                raise ConfigError(f"transition row {i} sums to {sum(row)}, not 1")

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64)

    @classmethod
    def identity(cls) -> "TransitionMatrix":
        return cls(tuple(tuple(1.0 if i == j else 0.0 for j in range(4)) for i in range(4)))


DEFAULT_RATES = {
    StageLabel.NEW: (0.10, 0.40, 0.30),
    StageLabel.WANDER: (0.60, 0.10, 0.45),
    StageLabel.STICK: (0.70, 0.70, 0.10),
    StageLabel.LOYAL: (0.80, 0.80, 0.70),
}

DEFAULT_TRANSITIONS = TransitionMatrix(
    (
        (0.94, 0.03, 0.02, 0.01),
        (0.02, 0.94, 0.03, 0.01),
        (0.01, 0.02, 0.94, 0.03),
        (0.01, 0.02, 0.03, 0.94),
    )
)


@dataclass(frozen=True)
class GeneratorConfig:
    num_users: int = 2000
    days: int = 30
    sessions_per_user_day: int = 2
    seed: int = 0
    task_names: tuple[str, ...] = ("ctr", "staytime", "cvr")
    d1: int = 3
    d3: int = 2
    user_vocab_sizes: tuple[int, ...] = (40, 40, 40)
    item_vocab_sizes: tuple[int, ...] = (20, 20)
    num_items: int = 500
    user_feature_noise: int = 10  # band width; > stage spacing makes bands overlap
    profiles: tuple[StageProfile, ...] = ()
    transitions: TransitionMatrix = DEFAULT_TRANSITIONS
    initial_stage_probs: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)

    def __post_init__(self):
        if not self.profiles:
            object.__setattr__(self, "profiles", default_profiles(self))

    @property
    def k(self) -> int:
        return len(self.task_names)

    def validate(self) -> None:
        if self.num_users < 0:
            raise ConfigError("num_users must be >= 0")
        for name in ("days", "sessions_per_user_day", "num_items", "user_feature_noise"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if len(self.user_vocab_sizes) != self.d1:
            raise ConfigError("user_vocab_sizes must have d1 entries")
        if len(self.item_vocab_sizes) != self.d3:
            raise ConfigError("item_vocab_sizes must have d3 entries")
        if any(v < 1 for v in self.user_vocab_sizes + self.item_vocab_sizes):
            raise ConfigError("vocab sizes must be positive")
        if len(self.profiles) != 4:
            raise ConfigError("exactly four stage profiles required")
        stages = [p.stage for p in self.profiles]
        if sorted(stages) != list(STAGES):
            raise ConfigError("profiles must cover each stage exactly once")
        for p in self.profiles:
            p.validate(self.k, self.d1)
        self.transitions.validate()
        if len(self.initial_stage_probs) != 4 or abs(sum(self.initial_stage_probs) - 1.0) > 1e-9:
            raise ConfigError("initial_stage_probs must be 4 values summing to 1")

    def profile_of(self, stage: StageLabel) -> StageProfile:
        return next(p for p in self.profiles if p.stage == stage)


def default_profiles(cfg: GeneratorConfig) -> tuple[StageProfile, ...]:
    """Stage profiles with evenly spaced feature bands and the default rates
    (padded/truncated to K tasks)."""
    profiles = []
    for idx, stage in enumerate(STAGES):
        base = DEFAULT_RATES[stage]
        rates = tuple((base * ((cfg.k + 2) // 3))[: cfg.k])
        shifts = tuple(idx * (v // 4) for v in cfg.user_vocab_sizes)
        profiles.append(StageProfile(stage, rates, shifts))
    return tuple(profiles)


@dataclass
class StageTruthTable:
    """Ground-truth stage per (user, day)."""

    user_ids: np.ndarray  # (M*days,) str
    days: np.ndarray  # (M*days,) int
    stages: np.ndarray  # (M*days,) int (StageLabel values)

    def __len__(self) -> int:
        return len(self.user_ids)

    def lookup(self) -> dict[tuple[str, int], int]:
        return {
            (str(u), int(d)): int(s)
            for u, d, s in zip(self.user_ids, self.days, self.stages)
        }

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["user_id", "day", "stage"])
            for u, d, s in zip(self.user_ids, self.days, self.stages):
                w.writerow([u, int(d), StageLabel(int(s)).display()])

    @classmethod
    def from_csv(cls, path: str | Path) -> "StageTruthTable":
        users, days, stages = [], [], []
        with Path(path).open(newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                users.append(row["user_id"])
                days.append(int(row["day"]))
                stages.append(int(StageLabel.from_str(row["stage"])))
        return cls(np.asarray(users, dtype=str), np.asarray(days), np.asarray(stages))


def generate(cfg: GeneratorConfig) -> tuple[Dataset, StageTruthTable]:
    """Simulate the configured population.

    Each user gets an independent random stream keyed by (seed, user index),
    so output is deterministic and independent of generation order. Per-user
    timestamps are strictly increasing; session labels are Bernoulli draws
    from the current day's stage rates.
    """
    cfg.validate()
    rates = np.stack([np.asarray(cfg.profile_of(s).rate_vector) for s in STAGES])
    shifts = np.stack([np.asarray(cfg.profile_of(s).feature_shift) for s in STAGES])
    trans = cfg.transitions.as_array()
    init = np.asarray(cfg.initial_stage_probs)
    uvocab = np.asarray(cfg.user_vocab_sizes)
    ivocab = np.asarray(cfg.item_vocab_sizes)
    step = max(1, DAY_SECONDS // (cfg.sessions_per_user_day + 1))

    user_ids, item_ids, timestamps = [], [], []
    user_feats, item_feats, labels = [], [], []
    truth_users, truth_days, truth_stages = [], [], []

    for u in range(cfg.num_users):
        uid = f"u{u:05d}"
        rng = np.random.default_rng((cfg.seed, u))
        stage = int(rng.choice(4, p=init))
        for day in range(cfg.days):
            if day > 0:
                stage = int(rng.choice(4, p=trans[stage]))
            truth_users.append(uid)
            truth_days.append(day)
            truth_stages.append(stage)
            for s in range(cfg.sessions_per_user_day):
                uf = (rng.integers(0, cfg.user_feature_noise, size=cfg.d1) + shifts[stage]) % uvocab
                itm = int(rng.integers(cfg.num_items))
                itf = rng.integers(0, ivocab, size=cfg.d3)
                y = (rng.random(cfg.k) < rates[stage]).astype(np.int8)
                user_ids.append(uid)
                item_ids.append(f"i{itm:05d}")
                timestamps.append(day * DAY_SECONDS + (s + 1) * step)
                user_feats.append(uf)
                item_feats.append(itf)
                labels.append(y)

    n = len(user_ids)
    ds = Dataset.from_columns(
        user_ids=user_ids,
        item_ids=item_ids,
        timestamps=timestamps,
        user_features=np.asarray(user_feats, dtype=np.int64).reshape(n, cfg.d1),
        item_features=np.asarray(item_feats, dtype=np.int64).reshape(n, cfg.d3),
        labels=np.asarray(labels, dtype=np.int8).reshape(n, cfg.k),
        task_names=cfg.task_names,
        user_vocab_sizes=cfg.user_vocab_sizes,
        item_vocab_sizes=cfg.item_vocab_sizes,
    )
    truth = StageTruthTable(
        np.asarray(truth_users, dtype=str),
        np.asarray(truth_days, dtype=np.int64),
        np.asarray(truth_stages, dtype=np.int64),
    )
    return ds, truth


@dataclass
class StageRateRow:
    stage: StageLabel
    task: str
    count: int
    configured: float
    empirical: float | None  # None when the stage drew no sessions
    sigma: float | None  # |empirical - configured| in binomial standard errors
    flagged: bool


@dataclass
class RateReport:
    rows: list[StageRateRow] = field(default_factory=list)

    @property
    def flagged(self) -> list[StageRateRow]:
        return [r for r in self.rows if r.flagged]

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.csv_bytes())

    def csv_bytes(self) -> bytes:
        lines = ["stage,task,count,configured,empirical,sigma,flagged"]
        for r in self.rows:
            emp = "" if r.empirical is None else repr(r.empirical)
            sig = "" if r.sigma is None else repr(r.sigma)
            lines.append(
                f"{r.stage.display()},{r.task},{r.count},{r.configured!r},{emp},{sig},"
                f"{str(r.flagged).lower()}"
            )
        return ("\n".join(lines) + "\n").encode("utf-8")


def validate_statistics(ds: Dataset, truth: StageTruthTable, cfg: GeneratorConfig) -> RateReport:
    """Compare per-stage empirical label rates against the configured rates.

    Flags any deviation beyond 3 binomial standard errors. Raises if some
    record's (user, day) is missing from the truth table.
    """
    lookup = truth.lookup()
    record_stage = np.empty(len(ds), dtype=np.int64)
    for i in range(len(ds)):
        key = (str(ds.user_ids[i]), int(ds.timestamps[i]) // DAY_SECONDS)
        if key not in lookup:
            raise DataValidationError(f"truth table has no stage for user/day {key}")
        record_stage[i] = lookup[key]

    report = RateReport()
    for stage in STAGES:
        mask = record_stage == int(stage)
        count = int(mask.sum())
        rates = cfg.profile_of(stage).rate_vector
        for j, task in enumerate(cfg.task_names):
            conf = float(rates[j])
            if count == 0:
                report.rows.append(StageRateRow(stage, task, 0, conf, None, None, False))
                continue
            emp = float(ds.labels[mask, j].mean())
            se = np.sqrt(conf * (1.0 - conf) / count)
            sigma = abs(emp - conf) / se
            report.rows.append(
                StageRateRow(stage, task, count, conf, emp, float(sigma), bool(sigma > 3.0))
            )
    return report
