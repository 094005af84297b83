"""Dataset schema, CSV ingestion, splits, binning, pseudo-labels, and rule stages."""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataValidationError, SchemaError

DAY_SECONDS = 86400


class StageLabel(enum.IntEnum):
    NEW = 0
    WANDER = 1
    STICK = 2
    LOYAL = 3

    def display(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_str(cls, s: str) -> "StageLabel":
        try:
            return cls[s.strip().upper()]
        except KeyError:
            raise DataValidationError(f"unknown stage label: {s!r}") from None


STAGES = (StageLabel.NEW, StageLabel.WANDER, StageLabel.STICK, StageLabel.LOYAL)


@dataclass
class InteractionRecord:
    """One (user, item, labels, timestamp) interaction."""

    user_id: str
    item_id: str
    timestamp: int
    user_feature_ids: np.ndarray  # (d1,) int
    item_feature_ids: np.ndarray  # (d3,) int
    labels: np.ndarray  # (K,) values in {0,1}
    raw_staytime: float | None = None

    def validate(self) -> None:
        if self.timestamp < 0:
            raise DataValidationError(f"negative timestamp {self.timestamp}")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataValidationError(f"labels must be in {{0,1}}, got {self.labels}")
        if self.raw_staytime is not None and self.raw_staytime < 0:
            raise DataValidationError("raw_staytime must be nonnegative")


@dataclass
class Dataset:
    """Columnar interaction log, canonically ordered by (user_id, timestamp).

    Within each user the records are chronological; users form contiguous
    blocks, which every per-user operation below relies on.
    """

    user_ids: np.ndarray  # (N,) str
    item_ids: np.ndarray  # (N,) str
    timestamps: np.ndarray  # (N,) int64
    user_features: np.ndarray  # (N, d1) int64
    item_features: np.ndarray  # (N, d3) int64
    labels: np.ndarray  # (N, K) int8
    task_names: tuple[str, ...]
    user_vocab_sizes: tuple[int, ...]
    item_vocab_sizes: tuple[int, ...]
    split_tag: str = "train"
    raw_staytime: np.ndarray | None = None  # (N,) float, optional

    @classmethod
    def from_columns(
        cls,
        user_ids: Sequence[str],
        item_ids: Sequence[str],
        timestamps: Sequence[int],
        user_features: np.ndarray,
        item_features: np.ndarray,
        labels: np.ndarray,
        task_names: Sequence[str],
        user_vocab_sizes: Sequence[int] | None = None,
        item_vocab_sizes: Sequence[int] | None = None,
        split_tag: str = "train",
        raw_staytime: Sequence[float] | None = None,
    ) -> "Dataset":
        n = len(user_ids)
        user_ids = np.asarray(user_ids, dtype=str)
        item_ids = np.asarray(item_ids, dtype=str)
        timestamps = np.asarray(timestamps, dtype=np.int64)
        user_features = _as_2d(np.asarray(user_features, dtype=np.int64), n)
        item_features = _as_2d(np.asarray(item_features, dtype=np.int64), n)
        labels = _as_2d(np.asarray(labels), n)
        stay = None if raw_staytime is None else np.asarray(raw_staytime, dtype=float)

        if n:
            order = np.lexsort((timestamps, user_ids))
            user_ids, item_ids, timestamps = user_ids[order], item_ids[order], timestamps[order]
            user_features, item_features = user_features[order], item_features[order]
            labels = labels[order]
            if stay is not None:
                stay = stay[order]

        if user_vocab_sizes is None:
            user_vocab_sizes = _computed_vocab(user_features)
        if item_vocab_sizes is None:
            item_vocab_sizes = _computed_vocab(item_features)

        ds = cls(
            user_ids=user_ids,
            item_ids=item_ids,
            timestamps=timestamps,
            user_features=user_features,
            item_features=item_features,
            labels=labels.astype(np.int8),
            task_names=tuple(task_names),
            user_vocab_sizes=tuple(int(v) for v in user_vocab_sizes),
            item_vocab_sizes=tuple(int(v) for v in item_vocab_sizes),
            split_tag=split_tag,
            raw_staytime=stay,
        )
        ds.validate()
        return ds

    def validate(self) -> None:
        n = len(self)
        if self.labels.shape != (n, self.num_tasks):
            raise DataValidationError("labels shape does not match task count")
        if n == 0:
            return
        if self.timestamps.min() < 0:
            raise DataValidationError("timestamps must be nonnegative")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataValidationError("labels must be binary after binning")
        for name, feats, vocabs in (
            ("user", self.user_features, self.user_vocab_sizes),
            ("item", self.item_features, self.item_vocab_sizes),
        ):
            if feats.shape[1] != len(vocabs):
                raise DataValidationError(f"{name} feature slot count != vocab count")
            for slot, size in enumerate(vocabs):
                col = feats[:, slot]
                if col.min() < 0 or (len(col) and col.max() >= size):
                    raise DataValidationError(
                        f"{name} feature slot {slot}: index out of range for vocab {size}"
                    )

    def __len__(self) -> int:
        return len(self.user_ids)

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    @property
    def m(self) -> int:
        """Number of distinct users."""
        return len(np.unique(self.user_ids)) if len(self) else 0

    def record(self, i: int) -> InteractionRecord:
        return InteractionRecord(
            user_id=str(self.user_ids[i]),
            item_id=str(self.item_ids[i]),
            timestamp=int(self.timestamps[i]),
            user_feature_ids=self.user_features[i],
            item_feature_ids=self.item_features[i],
            labels=self.labels[i],
            raw_staytime=None if self.raw_staytime is None else float(self.raw_staytime[i]),
        )

    @property
    def records(self) -> Iterator[InteractionRecord]:
        return (self.record(i) for i in range(len(self)))

    def subset(self, indices: np.ndarray, split_tag: str | None = None) -> "Dataset":
        """Row subset; `indices` must be ascending to preserve canonical order."""
        return replace(
            self,
            user_ids=self.user_ids[indices],
            item_ids=self.item_ids[indices],
            timestamps=self.timestamps[indices],
            user_features=self.user_features[indices],
            item_features=self.item_features[indices],
            labels=self.labels[indices],
            split_tag=self.split_tag if split_tag is None else split_tag,
            raw_staytime=None if self.raw_staytime is None else self.raw_staytime[indices],
        )

    def user_groups(self) -> Iterator[tuple[str, slice]]:
        """Contiguous per-user blocks in canonical order."""
        n = len(self)
        start = 0
        while start < n:
            stop = start
            uid = self.user_ids[start]
            while stop < n and self.user_ids[stop] == uid:
                stop += 1
            yield str(uid), slice(start, stop)
            start = stop

    def user_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-record index into the sorted distinct-user list."""
        users, idx = np.unique(self.user_ids, return_inverse=True)
        return idx, users


def _as_2d(arr: np.ndarray, n: int) -> np.ndarray:
    if arr.ndim == 2:
        return arr
    if n == 0:
        return arr.reshape(0, 0)
    return arr.reshape(n, -1)


def _computed_vocab(features: np.ndarray) -> tuple[int, ...]:
    if features.shape[0] == 0:
        return tuple(0 for _ in range(features.shape[1]))
    return tuple(int(features[:, s].max()) + 1 for s in range(features.shape[1]))


@dataclass(frozen=True)
class ColumnSchema:
    """Maps CSV column names onto the interaction schema.

    `labels` are task label columns in task order. Columns listed in
    `binned_labels` hold raw nonnegative reals (staytime seconds) and are
    equal-frequency binned at ingestion; the binary label is 1 for the upper
    half of the bins (with the default 2 bins this is simply the bin index).
    """

    user_id: str = "user_id"
    item_id: str = "item_id"
    timestamp: str = "timestamp"
    labels: tuple[str, ...] = ()
    user_features: tuple[str, ...] = ()
    item_features: tuple[str, ...] = ()
    binned_labels: tuple[str, ...] = ()
    staytime_bins: int = 2
    task_names: tuple[str, ...] | None = None

    def resolved_task_names(self) -> tuple[str, ...]:
        return self.task_names if self.task_names is not None else self.labels


def ingest_csv(path: str | Path, schema: ColumnSchema) -> Dataset:
    """Read an interaction CSV into a canonical Dataset.

    Per-user records end up sorted by timestamp and vocab sizes are computed
    from the data. Missing columns raise SchemaError; non-binary labels raise
    DataValidationError.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"no such file: {path}")
    if not schema.labels:
        raise SchemaError("schema must name at least one label column")

    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, header row required")
        header = set(reader.fieldnames)
        needed = (
            [schema.user_id, schema.item_id, schema.timestamp]
            + list(schema.labels)
            + list(schema.user_features)
            + list(schema.item_features)
        )
        missing = [c for c in needed if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        rows = list(reader)

    n = len(rows)
    k = len(schema.labels)
    user_ids = [r[schema.user_id] for r in rows]
    item_ids = [r[schema.item_id] for r in rows]
    timestamps = [_parse_int(r[schema.timestamp], schema.timestamp, i) for i, r in enumerate(rows)]
    user_features = np.array(
        [[_parse_int(r[c], c, i) for c in schema.user_features] for i, r in enumerate(rows)],
        dtype=np.int64,
    ).reshape(n, len(schema.user_features))
    item_features = np.array(
        [[_parse_int(r[c], c, i) for c in schema.item_features] for i, r in enumerate(rows)],
        dtype=np.int64,
    ).reshape(n, len(schema.item_features))

    labels = np.zeros((n, k), dtype=np.int8)
    raw_staytime = None
    for j, col in enumerate(schema.labels):
        if col in schema.binned_labels:
            raw = np.array([_parse_float(r[col], col, i) for i, r in enumerate(rows)])
            if (raw < 0).any():
                raise DataValidationError(f"column {col!r}: staytime must be nonnegative")
            if n:
                bins = equal_frequency_bin(raw, schema.staytime_bins)
                labels[:, j] = (bins >= (schema.staytime_bins + 1) // 2).astype(np.int8)
            raw_staytime = raw
        else:
            vals = np.array([_parse_float(r[col], col, i) for i, r in enumerate(rows)])
            if not np.isin(vals, (0.0, 1.0)).all():
                bad = vals[~np.isin(vals, (0.0, 1.0))][0]
                raise DataValidationError(f"column {col!r}: label {bad} not in {{0,1}}")
            labels[:, j] = vals.astype(np.int8)

    return Dataset.from_columns(
        user_ids=user_ids,
        item_ids=item_ids,
        timestamps=timestamps,
        user_features=user_features,
        item_features=item_features,
        labels=labels,
        task_names=schema.resolved_task_names(),
        raw_staytime=raw_staytime,
    )


def _parse_int(s: str, col: str, row: int) -> int:
    try:
        return int(s)
    except ValueError:
        raise DataValidationError(f"row {row}: column {col!r}: not an integer: {s!r}") from None


def _parse_float(s: str, col: str, row: int) -> float:
    try:
        return float(s)
    except ValueError:
        raise DataValidationError(f"row {row}: column {col!r}: not a number: {s!r}") from None


def write_interactions_csv(ds: Dataset, path: str | Path) -> None:
    """Write the canonical interaction CSV (re-ingestable via default_schema)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d1 = ds.user_features.shape[1]
    d3 = ds.item_features.shape[1]
    header = (
        ["user_id", "item_id", "timestamp"]
        + [f"label_{t}" for t in ds.task_names]
        + [f"uf_{i}" for i in range(d1)]
        + [f"if_{i}" for i in range(d3)]
    )
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for i in range(len(ds)):
            w.writerow(
                [ds.user_ids[i], ds.item_ids[i], int(ds.timestamps[i])]
                + [int(v) for v in ds.labels[i]]
                + [int(v) for v in ds.user_features[i]]
                + [int(v) for v in ds.item_features[i]]
            )


def default_schema(task_names: Sequence[str], d1: int, d3: int) -> ColumnSchema:
    """Schema matching write_interactions_csv output."""
    return ColumnSchema(
        labels=tuple(f"label_{t}" for t in task_names),
        user_features=tuple(f"uf_{i}" for i in range(d1)),
        item_features=tuple(f"if_{i}" for i in range(d3)),
        task_names=tuple(task_names),
    )


def equal_frequency_bin(values: Sequence[float], num_bins: int) -> np.ndarray:
    """Quantile-based binning: each bin gets floor(n/B) or ceil(n/B) items.

    Equal values all land in the bin of their first occurrence in sorted
    order. If there are fewer distinct values than bins, collapses to one bin
    per distinct value with a warning.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise DataValidationError("equal_frequency_bin: values must be nonempty")
    if num_bins < 2:
        raise ConfigError("equal_frequency_bin: num_bins must be >= 2")
    distinct = np.unique(v)
    if num_bins > distinct.size:
        warnings.warn(
            f"equal_frequency_bin: {num_bins} bins > {distinct.size} distinct values; "
            "collapsing to distinct-value bins",
            stacklevel=2,
        )
        return np.searchsorted(distinct, v).astype(np.int64)

    n = v.size
    order = np.argsort(v, kind="stable")
    position_bin = (np.arange(n) * num_bins) // n
    bins = np.empty(n, dtype=np.int64)
    first_bin: dict[float, int] = {}
    for rank, idx in enumerate(order):
        val = float(v[idx])
        if val not in first_bin:
            first_bin[val] = int(position_bin[rank])
        bins[idx] = first_bin[val]
    return bins


def chronological_split(
    ds: Dataset, fractions: tuple[float, float, float]
) -> tuple[Dataset, Dataset, Dataset]:
    """Split globally by timestamp; records tied at a boundary stay in the
    earlier split. Raises ConfigError if any split would be empty."""
    f = tuple(float(x) for x in fractions)
    if len(f) != 3 or any(x <= 0 for x in f):
        raise ConfigError(f"fractions must be three positive values, got {fractions}")
    if abs(sum(f) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    n = len(ds)
    order = np.argsort(ds.timestamps, kind="stable")
    ts_sorted = ds.timestamps[order]
    cut1 = _past_ties(ts_sorted, round(f[0] * n))
    cut2 = _past_ties(ts_sorted, max(round((f[0] + f[1]) * n), cut1))
    sizes = (cut1, cut2 - cut1, n - cut2)
    for tag, size in zip(("train", "valid", "test"), sizes):
        if size == 0:
            raise ConfigError(f"chronological_split: {tag} split would be empty")
    parts = (order[:cut1], order[cut1:cut2], order[cut2:])
    return tuple(
        ds.subset(np.sort(idx), tag) for idx, tag in zip(parts, ("train", "valid", "test"))
    )


def _past_ties(ts_sorted: np.ndarray, cut: int) -> int:
    while 0 < cut < len(ts_sorted) and ts_sorted[cut] == ts_sorted[cut - 1]:
        cut += 1
    return cut


def compute_pseudo_labels(
    ds: Dataset,
    window_days: int | None = None,
    impute: str = "exclude",
) -> tuple[np.ndarray, np.ndarray]:
    """Running mean of each user's strictly earlier labels.

    Returns (pseudo_labels (N,K) float64, has_history (N,) bool). With a
    finite `window_days` only prior records within that many days count.
    History-less records get pseudo-label 0 and mask False ("exclude"), or
    the global per-task mean and mask True ("global_mean").
    """
    if impute not in ("exclude", "global_mean"):
        raise ConfigError(f"unknown imputation mode {impute!r}")
    n, k = ds.labels.shape
    out = np.zeros((n, k), dtype=np.float64)
    has_history = np.zeros(n, dtype=bool)
    window = None if window_days is None else int(window_days) * DAY_SECONDS
    labels = ds.labels.astype(np.float64)

    for _, block in ds.user_groups():
        ts = ds.timestamps[block]
        lab = labels[block]
        cum = np.vstack([np.zeros(k), np.cumsum(lab, axis=0)])  # prefix sums
        start = 0
        for j in range(len(ts)):
            if window is not None:
                while ts[start] < ts[j] - window:
                    start += 1
            count = j - start
            if count > 0:
                i = block.start + j
                out[i] = (cum[j] - cum[start]) / count
                has_history[i] = True

    if impute == "global_mean" and n:
        fill = labels.mean(axis=0)
        out[~has_history] = fill
        has_history[:] = True
    return out, has_history


@dataclass
class UserAggregate:
    """Per-user mean label for each task."""

    user_id: str
    task_means: np.ndarray  # (K,) in [0,1]
    record_count: int


def compute_user_aggregates(ds: Dataset) -> list[UserAggregate]:
    aggs = []
    for uid, block in ds.user_groups():
        lab = ds.labels[block].astype(np.float64)
        aggs.append(UserAggregate(uid, lab.mean(axis=0), block.stop - block.start))
    return aggs


@dataclass(frozen=True)
class StageTaskOrder:
    """Task indices feeding the rule-stage cascade, in cascade order."""

    ctr: int = 0
    staytime: int = 1
    cvr: int = 2


def stage_medians(
    aggs: Sequence[UserAggregate], order: StageTaskOrder = StageTaskOrder()
) -> np.ndarray:
    """Per-metric medians of the user aggregates, in cascade order."""
    if not aggs:
        raise DataValidationError("stage_medians: no aggregates")
    means = np.stack([a.task_means for a in aggs])
    return np.array(
        [
            np.median(means[:, order.ctr]),
            np.median(means[:, order.staytime]),
            np.median(means[:, order.cvr]),
        ]
    )


def assign_rule_stage(
    agg: UserAggregate,
    medians: Sequence[float],
    order: StageTaskOrder = StageTaskOrder(),
) -> StageLabel:
    """Median-cascade stage rule: low CTR -> New, else low staytime ->
    Wander, else low CVR -> Stick, else Loyal."""
    k = len(agg.task_means)
    needed = max(order.ctr, order.staytime, order.cvr)
    if k <= needed or k < 3:
        raise ConfigError(
            f"rule stages need at least 3 tasks covering indices {order}, got K={k}"
        )
    if len(medians) != 3:
        raise ConfigError("medians must have exactly 3 entries (ctr, staytime, cvr)")
    if agg.task_means[order.ctr] < medians[0]:
        return StageLabel.NEW
    if agg.task_means[order.staytime] < medians[1]:
        return StageLabel.WANDER
    if agg.task_means[order.cvr] < medians[2]:
        return StageLabel.STICK
    return StageLabel.LOYAL


def rule_stage_map(
    ds: Dataset, order: StageTaskOrder = StageTaskOrder()
) -> dict[str, StageLabel]:
    """Stage per user from this split's aggregates and medians."""
    aggs = compute_user_aggregates(ds)
    medians = stage_medians(aggs, order)
    return {a.user_id: assign_rule_stage(a, medians, order) for a in aggs}


def export_user_aggregates(aggs: Sequence[UserAggregate], task_names: Sequence[str], path: str | Path) -> None:
    _export_user_task_values(
        path, ((a.user_id, t, a.task_means[j]) for a in aggs for j, t in enumerate(task_names))
    )


def export_pseudo_labels(
    ds: Dataset, pseudo: np.ndarray, mask: np.ndarray, path: str | Path
) -> None:
    rows = (
        (str(ds.user_ids[i]), t, pseudo[i, j])
        for i in range(len(ds))
        if mask[i]
        for j, t in enumerate(ds.task_names)
    )
    _export_user_task_values(path, rows)


def _export_user_task_values(path: str | Path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["user_id", "task", "value"])
        for uid, task, value in rows:
            w.writerow([uid, task, repr(float(value))])
