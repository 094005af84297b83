"""Ranking/classification metrics, relative-improvement comparisons, and the
per-stage subset experiment."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset, StageLabel, STAGES, rule_stage_map, stage_medians, compute_user_aggregates, assign_rule_stage, StageTaskOrder
from .errors import ConfigError, UndefinedMetricError


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outranks a random negative; ties count
    one half. Computed from average ranks (equals brute-force pair counting)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ConfigError("scores and labels must be equal-length 1-D sequences")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != len(y):
        raise UndefinedMetricError("labels must be binary")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: labels contain a single class")
    ranks = _average_ranks(s)
    pos_rank_sum = float(ranks[y == 1].sum())
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # 1-based average rank
        i = j + 1
    return ranks


@dataclass
class ScoredGroup:
    """One ranking unit: a user's (or request's) scored candidates."""

    key: str
    scores: Sequence[float]
    labels: Sequence[int]

    def __post_init__(self):
        if len(self.scores) != len(self.labels) or len(self.scores) < 1:
            raise ConfigError(f"group {self.key!r}: scores/labels must be equal length >= 1")


def ndcg_at_k(group: ScoredGroup, k: int) -> float:
    """Binary-gain NDCG truncated at rank k; score ties keep original order.

    Raises UndefinedMetricError for groups without a positive label (callers
    exclude those upstream and report the count).
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    labels = np.asarray(group.labels, dtype=np.float64)
    if labels.sum() == 0:
        raise UndefinedMetricError(f"group {group.key!r} has no positive label")
    scores = np.asarray(group.scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    top = min(k, len(labels))
    dcg = sum(labels[order[i]] / math.log2(i + 2) for i in range(top))
    ideal = np.sort(labels)[::-1]
    idcg = sum(ideal[i] / math.log2(i + 2) for i in range(top))
    return dcg / idcg


def mean_ndcg(groups: Iterable[ScoredGroup], k: int) -> tuple[float, int]:
    """Average NDCG@k over groups with at least one positive; returns the
    mean and the number of excluded (all-negative) groups."""
    values = []
    excluded = 0
    for g in groups:
        try:
            values.append(ndcg_at_k(g, k))
        except UndefinedMetricError:
            excluded += 1
    if not values:
        raise UndefinedMetricError("every group lacked a positive label")
    return float(np.mean(values)), excluded


def user_groups_from_scores(ds: Dataset, scores: np.ndarray, task: int) -> list[ScoredGroup]:
    """Per-user ranking groups for one task over the given split."""
    return [
        ScoredGroup(uid, scores[block, task], ds.labels[block, task])
        for uid, block in ds.user_groups()
    ]


def relaimpr_auc(measured: float, base: float) -> float:
    """Relative AUC improvement over a base model, in percent above the 0.5
    random-guess floor."""
    if base <= 0.5:
        raise UndefinedMetricError(f"base AUC {base} is not above the 0.5 floor")
    return ((measured - 0.5) / (base - 0.5) - 1.0) * 100.0


def relaimpr_ndcg(measured: float, base: float) -> float:
    """Relative NDCG improvement over a base model, in percent."""
    if base <= 0.0:
        raise UndefinedMetricError(f"base NDCG {base} must be positive")
    return (measured / base - 1.0) * 100.0


@dataclass
class TaskMetrics:
    task: str
    auc: float | None
    ndcg: float | None
    ndcg_excluded_groups: int = 0
    relaimpr_auc: float | None = None
    relaimpr_ndcg: float | None = None


@dataclass
class MetricReport:
    arch: str
    dataset: str
    seed: int
    k: int
    tasks: list[TaskMetrics] = field(default_factory=list)

    def task(self, name: str) -> TaskMetrics:
        for t in self.tasks:
            if t.task == name:
                return t
        raise KeyError(name)

    def mean_auc(self) -> float:
        vals = [t.auc for t in self.tasks if t.auc is not None]
        if not vals:
            raise UndefinedMetricError("no defined AUC values in report")
        return float(np.mean(vals))

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(
                ["arch", "dataset", "seed", "k", "task", "auc", "ndcg",
                 "ndcg_excluded_groups", "relaimpr_auc", "relaimpr_ndcg"]
            )
            for t in self.tasks:
                w.writerow(
                    [self.arch, self.dataset, self.seed, self.k, t.task,
                     _fmt(t.auc), _fmt(t.ndcg), t.ndcg_excluded_groups,
                     _fmt(t.relaimpr_auc), _fmt(t.relaimpr_ndcg)]
                )

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricReport":
        with Path(path).open(newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise ConfigError(f"{path}: empty metric report")
        first = rows[0]
        report = cls(first["arch"], first["dataset"], int(first["seed"]), int(first["k"]))
        for r in rows:
            report.tasks.append(
                TaskMetrics(
                    task=r["task"],
                    auc=_parse(r["auc"]),
                    ndcg=_parse(r["ndcg"]),
                    ndcg_excluded_groups=int(r["ndcg_excluded_groups"]),
                    relaimpr_auc=_parse(r["relaimpr_auc"]),
                    relaimpr_ndcg=_parse(r["relaimpr_ndcg"]),
                )
            )
        return report


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def _parse(s: str) -> float | None:
    return None if s == "" else float(s)


def evaluate_scores(
    ds: Dataset,
    scores: np.ndarray,
    arch: str,
    seed: int,
    k: int,
    dataset_tag: str | None = None,
) -> MetricReport:
    """Assemble per-task AUC and per-user NDCG@k for one model's scores."""
    report = MetricReport(arch, dataset_tag or ds.split_tag, seed, k)
    for j, name in enumerate(ds.task_names):
        try:
            a = auc(scores[:, j], ds.labels[:, j])
        except UndefinedMetricError:
            warnings.warn(f"task {name!r}: AUC undefined on this split", stacklevel=2)
            a = None
        try:
            n, excluded = mean_ndcg(user_groups_from_scores(ds, scores, j), k)
        except UndefinedMetricError:
            n, excluded = None, 0
        report.tasks.append(TaskMetrics(name, a, n, excluded))
    return report


def attach_relaimpr(reports: Sequence[MetricReport], base_arch: str) -> None:
    """Fill each report's RelaImpr columns against the named base model."""
    base = next((r for r in reports if r.arch == base_arch), None)
    if base is None:
        raise ConfigError(f"no report for base architecture {base_arch!r}")
    for rep in reports:
        for t in rep.tasks:
            bt = base.task(t.task)
            if t.auc is not None and bt.auc is not None and bt.auc > 0.5:
                t.relaimpr_auc = relaimpr_auc(t.auc, bt.auc)
            if t.ndcg is not None and bt.ndcg is not None and bt.ndcg > 0:
                t.relaimpr_ndcg = relaimpr_ndcg(t.ndcg, bt.ndcg)


def render_comparison(reports: Sequence[MetricReport], base_arch: str) -> str:
    """Text grid (task x metric x architecture) with RelaImpr vs the base."""
    attach_relaimpr(reports, base_arch)
    archs = [r.arch for r in reports]
    tasks = [t.task for t in reports[0].tasks]
    width = max(12, *(len(a) + 2 for a in archs))
    lines = []
    header = f"{'task':<12}{'metric':<14}" + "".join(f"{a:>{width}}" for a in archs)
    lines.append(header)
    lines.append("-" * len(header))
    for task in tasks:
        rows = [
            ("auc", lambda t: _cell(t.auc)),
            ("relaimpr_auc", lambda t: _cell(t.relaimpr_auc, "%")),
            ("ndcg", lambda t: _cell(t.ndcg)),
            ("relaimpr_ndcg", lambda t: _cell(t.relaimpr_ndcg, "%")),
        ]
        for metric, fmt in rows:
            cells = "".join(f"{fmt(r.task(task)):>{width}}" for r in reports)
            lines.append(f"{task:<12}{metric:<14}" + cells)
    return "\n".join(lines) + "\n"


def _cell(v: float | None, suffix: str = "") -> str:
    return "-" if v is None else f"{v:.4f}{suffix}"


@dataclass
class StageSubsetRow:
    stage: StageLabel
    model: str  # "stage_single" or "full"
    task: str
    auc: float | None
    ndcg: float | None


@dataclass
class StageSubsetResult:
    rows: list[StageSubsetRow] = field(default_factory=list)
    skipped_stages: list[StageLabel] = field(default_factory=list)

    def auc_of(self, stage: StageLabel, model: str, task: str) -> float | None:
        for r in self.rows:
            if r.stage == stage and r.model == model and r.task == task:
                return r.auc
        return None

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["stage", "model", "task", "auc", "ndcg"])
            for r in self.rows:
                w.writerow([r.stage.display(), r.model, r.task, _fmt(r.auc), _fmt(r.ndcg)])


def stage_subset_eval(
    ds_train: Dataset,
    ds_valid: Dataset,
    ds_test: Dataset,
    train_cfg,
    ndcg_k: int = 5,
    order: StageTaskOrder = StageTaskOrder(),
) -> StageSubsetResult:
    """Train one model per rule-stage user subset and compare in-stage test
    metrics against a single full-data model of the same architecture."""
    from .training import predict_scores, train  # local import; training uses metrics too

    stage_map = rule_stage_map(ds_train, order)
    medians = stage_medians(compute_user_aggregates(ds_train), order)
    # users absent from train get a stage from their own split's aggregate
    for split in (ds_valid, ds_test):
        for agg in compute_user_aggregates(split):
            if agg.user_id not in stage_map:
                stage_map[agg.user_id] = assign_rule_stage(agg, medians, order)

    def stage_rows(ds: Dataset, stage: StageLabel) -> np.ndarray:
        stages = np.array([int(stage_map[str(u)]) for u in ds.user_ids])
        return np.flatnonzero(stages == int(stage))

    result = StageSubsetResult()
    full_state = train(ds_train, ds_valid, train_cfg)
    full_scores = predict_scores(full_state, ds_test)

    for stage in STAGES:
        train_idx = stage_rows(ds_train, stage)
        valid_idx = stage_rows(ds_valid, stage)
        test_idx = stage_rows(ds_test, stage)
        if len(train_idx) == 0 or len(valid_idx) == 0 or len(test_idx) == 0:
            warnings.warn(f"stage {stage.display()}: empty subset, skipped", stacklevel=2)
            result.skipped_stages.append(stage)
            continue
        sub_train = ds_train.subset(train_idx, "train")
        sub_valid = ds_valid.subset(valid_idx, "valid")
        sub_test = ds_test.subset(test_idx, "test")
        state = train(sub_train, sub_valid, train_cfg)
        sub_scores = predict_scores(state, sub_test)
        full_on_stage = full_scores[test_idx]
        for j, task in enumerate(ds_test.task_names):
            for model, scores, split in (
                ("stage_single", sub_scores, sub_test),
                ("full", full_on_stage, sub_test),
            ):
                try:
                    a = auc(scores[:, j], split.labels[:, j])
                except UndefinedMetricError:
                    a = None
                try:
                    n, _ = mean_ndcg(user_groups_from_scores(split, scores, j), ndcg_k)
                except UndefinedMetricError:
                    n = None
                result.rows.append(StageSubsetRow(stage, model, task, a, n))
    return result
