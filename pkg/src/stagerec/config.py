"""Flat key=value experiment configuration.

One file drives every subcommand: `section.key = value` lines, `#` comments.
Environment variables override file values with the STAGEREC__ prefix and
double underscores for dots (STAGEREC__TRAIN__EPOCHS=5). Unknown keys are
rejected. See README for the full key reference.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace
from pathlib import Path

from .data import STAGES, ColumnSchema, default_schema
from .errors import ConfigError
from .synthetic import GeneratorConfig, StageProfile, TransitionMatrix
from .training import TrainConfig

ENV_PREFIX = "STAGEREC__"


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip() != "")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip() != "")


def _parse_strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip() != "")


_STAGE_NAMES = tuple(s.name.lower() for s in STAGES)

KEY_TYPES: dict[str, object] = {
    "seed": int,
    "output.dir": str,
    "data.interactions": str,
    "data.truth": str,
    "data.train_fraction": float,
    "data.valid_fraction": float,
    "data.test_fraction": float,
    "data.user_id_col": str,
    "data.item_id_col": str,
    "data.timestamp_col": str,
    "data.label_columns": _parse_strs,
    "data.user_feature_columns": _parse_strs,
    "data.item_feature_columns": _parse_strs,
    "data.binned_labels": _parse_strs,
    "data.staytime_bins": int,
    "data.task_names": _parse_strs,
    "metrics.ndcg_k": int,
    "report.base_arch": str,
    "export.users_per_stage": int,
    "generator.num_users": int,
    "generator.days": int,
    "generator.sessions_per_user_day": int,
    "generator.task_names": _parse_strs,
    "generator.d1": int,
    "generator.d3": int,
    "generator.user_vocab_sizes": _parse_ints,
    "generator.item_vocab_sizes": _parse_ints,
    "generator.num_items": int,
    "generator.user_feature_noise": int,
    "generator.initial_stage_probs": _parse_floats,
    "train.architecture": str,
    "train.learning_rate": float,
    "train.adam_beta1": float,
    "train.adam_beta2": float,
    "train.adam_epsilon": float,
    "train.batch_size": int,
    "train.embedding_dim": int,
    "train.user_embedding_dim": int,
    "train.item_embedding_dim": int,
    "train.expert_dim": int,
    "train.expert_hidden": _parse_ints,
    "train.tower_hidden": _parse_ints,
    "train.bottom_hidden": _parse_ints,
    "train.num_specific_experts": int,
    "train.num_shared_experts": int,
    "train.ple_layers": int,
    "train.epochs": int,
    "train.eta": _parse_floats,
    "train.gamma_mode": str,
    "train.gamma_per_batch": _parse_bool,
    "train.pseudo_label_window_days": int,  # 0 means unlimited
    "train.pseudo_label_impute": str,
    "train.patience": int,
}
for _stage in _STAGE_NAMES:
    KEY_TYPES[f"generator.profile.{_stage}.rates"] = _parse_floats
    KEY_TYPES[f"generator.profile.{_stage}.feature_shift"] = _parse_ints
    KEY_TYPES[f"generator.transitions.{_stage}"] = _parse_floats


def read_config_file(path: str | Path) -> dict[str, str]:
    """Raw key -> value strings from a config file."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def apply_env_overrides(raw: dict[str, str], environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = dict(raw)
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX) :].lower().replace("__", ".")
            out[key] = value
    return out


def parse_values(raw: dict[str, str]) -> dict[str, object]:
    unknown = sorted(set(raw) - set(KEY_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values: dict[str, object] = {}
    for key, text in raw.items():
        parser = KEY_TYPES[key]
        try:
            values[key] = parser(text)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"config key {key!r}: {e}") from None
    return values


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: Path
    generator: GeneratorConfig
    train: TrainConfig
    fractions: tuple[float, float, float]
    ndcg_k: int
    base_arch: str
    export_users_per_stage: int
    interactions_path: Path | None
    truth_path: Path | None
    raw: dict[str, str]

    def config_hash(self) -> str:
        lines = [f"{k}={self.raw[k]}" for k in sorted(self.raw)]
        lines.append(f"seed={self.seed}")
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()

    def schema(self) -> ColumnSchema:
        """Column mapping for ingestion; defaults to the generator's canonical
        CSV layout unless data.* keys override it."""
        v = parse_values(self.raw)
        if "data.label_columns" in v:
            return ColumnSchema(
                user_id=v.get("data.user_id_col", "user_id"),
                item_id=v.get("data.item_id_col", "item_id"),
                timestamp=v.get("data.timestamp_col", "timestamp"),
                labels=v["data.label_columns"],
                user_features=v.get("data.user_feature_columns", ()),
                item_features=v.get("data.item_feature_columns", ()),
                binned_labels=v.get("data.binned_labels", ()),
                staytime_bins=v.get("data.staytime_bins", 2),
                task_names=v.get("data.task_names"),
            )
        return default_schema(self.generator.task_names, self.generator.d1, self.generator.d3)


def load_experiment_config(
    path: str | Path | None,
    seed_override: int | None = None,
    out_override: str | None = None,
    arch_override: str | None = None,
    k_override: int | None = None,
    environ=None,
) -> ExperimentConfig:
    raw = read_config_file(path) if path is not None else {}
    raw = apply_env_overrides(raw, environ)
    if seed_override is not None:
        raw["seed"] = str(seed_override)
    if out_override is not None:
        raw["output.dir"] = str(out_override)
    if arch_override is not None:
        raw["train.architecture"] = arch_override
    if k_override is not None:
        raw["metrics.ndcg_k"] = str(k_override)
    values = parse_values(raw)

    seed = int(values.get("seed", 0))
    generator = _build_generator(values, seed)
    train = _build_train(values, seed)
    fractions = (
        float(values.get("data.train_fraction", 0.7)),
        float(values.get("data.valid_fraction", 0.15)),
        float(values.get("data.test_fraction", 0.15)),
    )
    return ExperimentConfig(
        seed=seed,
        out_dir=Path(values.get("output.dir", "runs")),
        generator=generator,
        train=train,
        fractions=fractions,
        ndcg_k=int(values.get("metrics.ndcg_k", 5)),
        base_arch=str(values.get("report.base_arch", "single_mlp")),
        export_users_per_stage=int(values.get("export.users_per_stage", 1000)),
        interactions_path=Path(values["data.interactions"]) if "data.interactions" in values else None,
        truth_path=Path(values["data.truth"]) if "data.truth" in values else None,
        raw=raw,
    )


def _build_generator(values: dict[str, object], seed: int) -> GeneratorConfig:
    kwargs = {"seed": seed}
    mapping = {
        "generator.num_users": "num_users",
        "generator.days": "days",
        "generator.sessions_per_user_day": "sessions_per_user_day",
        "generator.task_names": "task_names",
        "generator.d1": "d1",
        "generator.d3": "d3",
        "generator.user_vocab_sizes": "user_vocab_sizes",
        "generator.item_vocab_sizes": "item_vocab_sizes",
        "generator.num_items": "num_items",
        "generator.user_feature_noise": "user_feature_noise",
        "generator.initial_stage_probs": "initial_stage_probs",
    }
    for key, attr in mapping.items():
        if key in values:
            kwargs[attr] = values[key]
    base = GeneratorConfig(**kwargs)

    profiles = list(base.profiles)
    for i, stage in enumerate(STAGES):
        name = stage.name.lower()
        rates = values.get(f"generator.profile.{name}.rates")
        shift = values.get(f"generator.profile.{name}.feature_shift")
        if rates is not None or shift is not None:
            profiles[i] = StageProfile(
                stage=stage,
                rate_vector=tuple(rates) if rates is not None else profiles[i].rate_vector,
                feature_shift=tuple(shift) if shift is not None else profiles[i].feature_shift,
            )
    transition_rows = [values.get(f"generator.transitions.{s}") for s in _STAGE_NAMES]
    if any(r is not None for r in transition_rows):
        if any(r is None for r in transition_rows):
            raise ConfigError("either give all four generator.transitions.* rows or none")
        transitions = TransitionMatrix(tuple(tuple(r) for r in transition_rows))
    else:
        transitions = base.transitions
    cfg = replace(base, profiles=tuple(profiles), transitions=transitions)
    cfg.validate()
    return cfg


def _build_train(values: dict[str, object], seed: int) -> TrainConfig:
    kwargs = {"seed": seed}
    for key, value in values.items():
        if not key.startswith("train."):
            continue
        attr = key[len("train.") :]
        if attr == "pseudo_label_window_days":
            kwargs[attr] = None if int(value) == 0 else int(value)
        else:
            kwargs[attr] = value
    return TrainConfig(**kwargs)
