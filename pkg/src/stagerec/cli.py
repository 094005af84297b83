"""Experiment runner: generate data, train architectures, evaluate, report,
export embeddings, and run the per-stage subset study."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, load_experiment_config
from .data import (
    Dataset,
    StageLabel,
    STAGES,
    chronological_split,
    ingest_csv,
    rule_stage_map,
    write_interactions_csv,
)
from .errors import ConfigError, DataValidationError, SchemaError, TrainingDiverged, UndefinedMetricError
from .metrics import MetricReport, evaluate_scores, render_comparison, stage_subset_eval
from .synthetic import generate, validate_statistics
from .training import TrainState, load_checkpoint, predict_scores, save_checkpoint, train

_ERRORS = (
    ConfigError,
    DataValidationError,
    SchemaError,
    TrainingDiverged,
    UndefinedMetricError,
    FileNotFoundError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagerec",
        description="Stage-adaptive multi-task recommendation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_: str, arch: bool = False, dataset: bool = False, k: bool = False):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, default=None, help="key=value config file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", type=Path, default=None, help="output directory")
        if arch:
            sp.add_argument("--arch", default=None, help="architecture to use")
        if dataset:
            sp.add_argument(
                "--dataset", type=Path, default=None,
                help="directory holding interactions.csv (defaults to <out>/data)",
            )
        if k:
            sp.add_argument("--k", type=int, default=None, help="NDCG cutoff")
        sp.set_defaults(func=func)
        return sp

    add("generate", cmd_generate, "simulate a synthetic interaction log")
    add("train", cmd_train, "train one architecture", arch=True, dataset=True)
    add("evaluate", cmd_evaluate, "score the test split with a trained model",
        arch=True, dataset=True, k=True)
    add("report", cmd_report, "render the task x metric x architecture comparison")
    add("export-embeddings", cmd_export_embeddings,
        "dump preference embeddings, gamma, and rule stages for projection",
        arch=True, dataset=True)
    add("stage-subset", cmd_stage_subset, "per-stage training study",
        arch=True, dataset=True, k=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_experiment_config(
            args.config,
            seed_override=args.seed,
            out_override=None if args.out is None else str(args.out),
            arch_override=getattr(args, "arch", None),
            k_override=getattr(args, "k", None),
        )
        return args.func(args, cfg)
    except _ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _write_manifest(directory: Path, command: str, cfg: ExperimentConfig, outputs: list[Path]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "outputs": sorted(str(o) for o in outputs),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _dataset_dir(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "dataset", None) is not None:
        return args.dataset
    return cfg.out_dir / "data"


def _load_full(args, cfg: ExperimentConfig) -> Dataset:
    if getattr(args, "dataset", None) is None and cfg.interactions_path is not None:
        path = cfg.interactions_path
    else:
        path = _dataset_dir(args, cfg) / "interactions.csv"
    return ingest_csv(path, cfg.schema())


def _load_splits(args, cfg: ExperimentConfig):
    return chronological_split(_load_full(args, cfg), cfg.fractions)


def cmd_generate(args, cfg: ExperimentConfig) -> int:
    out = cfg.out_dir / "data"
    ds, truth = generate(cfg.generator)
    write_interactions_csv(ds, out / "interactions.csv")
    truth.to_csv(out / "truth.csv")
    report = validate_statistics(ds, truth, cfg.generator)
    report.to_csv(out / "rate_report.csv")
    _write_manifest(out, "generate", cfg,
                    [out / "interactions.csv", out / "truth.csv", out / "rate_report.csv"])
    flagged = len(report.flagged)
    print(f"generated {len(ds)} records for {ds.m} users -> {out} "
          f"({flagged} rate deviations beyond 3 sigma)")
    return 0


def cmd_train(args, cfg: ExperimentConfig) -> int:
    ds_train, ds_valid, _ = _load_splits(args, cfg)
    arch = cfg.train.architecture
    run_dir = cfg.out_dir / arch
    state = train(ds_train, ds_valid, cfg.train, log_path=run_dir / "train_log.jsonl")
    save_checkpoint(state, run_dir / "checkpoint", config_hash=cfg.config_hash())
    _write_manifest(run_dir, "train", cfg, [run_dir / "checkpoint", run_dir / "train_log.jsonl"])
    best = "n/a" if state.best_epoch < 0 else f"{state.best_score:.4f} (epoch {state.best_epoch})"
    print(f"trained {arch} for {state.epoch} epochs; best mean valid AUC {best}")
    return 0


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    _, _, ds_test = _load_splits(args, cfg)
    arch = cfg.train.architecture
    run_dir = cfg.out_dir / arch
    state = load_checkpoint(run_dir / "checkpoint")
    scores = predict_scores(state, ds_test)
    report = evaluate_scores(ds_test, scores, arch, cfg.seed, cfg.ndcg_k, dataset_tag="test")
    report.to_csv(run_dir / "metrics.csv")
    _write_manifest(run_dir, "evaluate", cfg, [run_dir / "metrics.csv"])
    for t in report.tasks:
        auc_s = "n/a" if t.auc is None else f"{t.auc:.4f}"
        ndcg_s = "n/a" if t.ndcg is None else f"{t.ndcg:.4f}"
        print(f"{arch} {t.task}: auc={auc_s} ndcg@{cfg.ndcg_k}={ndcg_s}")
    return 0


def cmd_report(args, cfg: ExperimentConfig) -> int:
    reports = []
    for path in sorted(cfg.out_dir.glob("*/metrics.csv")):
        reports.append(MetricReport.from_csv(path))
    if not reports:
        raise ConfigError(f"no metrics.csv files under {cfg.out_dir}")
    text = render_comparison(reports, cfg.base_arch)
    (cfg.out_dir / "report.txt").write_text(text)
    _write_manifest(cfg.out_dir, "report", cfg, [cfg.out_dir / "report.txt"])
    print(text, end="")
    return 0


def cmd_export_embeddings(args, cfg: ExperimentConfig) -> int:
    ds_train, _, _ = _load_splits(args, cfg)
    arch = cfg.train.architecture
    if arch not in ("stan", "stan_no_beta"):
        raise ConfigError("export-embeddings needs a stan or stan_no_beta checkpoint")
    run_dir = cfg.out_dir / arch
    state = load_checkpoint(run_dir / "checkpoint")

    stage_map = rule_stage_map(ds_train)
    last_index = {uid: block.stop - 1 for uid, block in ds_train.user_groups()}
    rng = np.random.default_rng((cfg.seed, 101))
    sampled: list[str] = []
    for stage in STAGES:
        users = sorted(u for u, s in stage_map.items() if s == stage)
        take = min(len(users), cfg.export_users_per_stage)
        if take:
            picks = rng.choice(len(users), size=take, replace=False)
            sampled.extend(users[i] for i in sorted(picks))

    k = ds_train.num_tasks
    d1 = ds_train.user_features.shape[1]
    d2 = state.preference.user_dim
    gamma = state.posteriors.means() if state.posteriors is not None else None
    out_path = run_dir / "embeddings.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        header = ["user_id"]
        header += [f"s_{j}" for j in range(k * d1 * d2)]
        header += [f"gamma_{t}" for t in ds_train.task_names]
        header.append("stage")
        w.writerow(header)
        for uid in sampled:
            i = last_index[uid]
            feats = torch.from_numpy(ds_train.user_features[i : i + 1])
            with torch.no_grad():
                s = state.preference.task_embeddings(feats).double().numpy().reshape(-1)
            if gamma is not None:
                g = gamma[state.posteriors.row(uid)]
            else:
                g = predict_preferences_row(state, feats)
            row = [uid] + [repr(float(v)) for v in s]
            row += [repr(float(v)) for v in g]
            row.append(StageLabel(stage_map[uid]).display())
            w.writerow(row)

    pref_path = run_dir / "preferences.csv"
    _export_preference_csv(state, ds_train, pref_path)
    _write_manifest(run_dir, "export-embeddings", cfg, [out_path, pref_path])
    print(f"exported {len(sampled)} user embeddings -> {out_path}")
    return 0


def predict_preferences_row(state: TrainState, feats: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return state.preference(feats).double().numpy().reshape(-1)


def _export_preference_csv(state: TrainState, ds: Dataset, path: Path) -> None:
    from .training import predict_preferences

    tilde = predict_preferences(state, ds)
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["user_id", "timestamp"] + [f"pref_{t}" for t in ds.task_names])
        for i in range(len(ds)):
            w.writerow(
                [ds.user_ids[i], int(ds.timestamps[i])] + [repr(float(v)) for v in tilde[i]]
            )


def cmd_stage_subset(args, cfg: ExperimentConfig) -> int:
    ds_train, ds_valid, ds_test = _load_splits(args, cfg)
    result = stage_subset_eval(ds_train, ds_valid, ds_test, cfg.train, ndcg_k=cfg.ndcg_k)
    out = cfg.out_dir / "stage_subset"
    result.to_csv(out / "metrics.csv")
    _write_manifest(out, "stage-subset", cfg, [out / "metrics.csv"])
    for row in result.rows:
        auc_s = "n/a" if row.auc is None else f"{row.auc:.4f}"
        print(f"{row.stage.display():<8} {row.model:<13} {row.task}: auc={auc_s}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
