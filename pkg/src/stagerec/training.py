"""Joint training loop: composes the stage-weighted objective, optimizes with
Adam, tracks the best validation snapshot, and round-trips checkpoints."""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import (
    Dataset,
    StageTaskOrder,
    assign_rule_stage,
    compute_pseudo_labels,
    compute_user_aggregates,
    rule_stage_map,
    stage_medians,
)
from .errors import ConfigError, TrainingDiverged, UndefinedMetricError
from .metrics import auc
from .models import BackboneConfig, PreferenceNet, build_backbone, preference_loss
from .stages import GammaStreams, PosteriorStore

BCE_CLAMP = 1e-7


def per_sample_bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))


def task_loss(pred, target) -> torch.Tensor:
    """Summed binary cross-entropy; predictions clamped away from {0,1}."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    if not bool(((target == 0) | (target == 1)).all()):
        raise ConfigError("task_loss targets must be binary")
    return per_sample_bce(pred, target).sum()


def total_loss(task_losses, pref_losses, gamma) -> torch.Tensor:
    """Stage-weighted objective: sum_k (gamma_k * L_task_k + L_pref_k)."""
    if not (len(task_losses) == len(pref_losses) == len(gamma)):
        raise ConfigError("task_losses, pref_losses, and gamma must share length K")
    terms = [g * lt + ls for g, lt, ls in zip(gamma, task_losses, pref_losses)]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


@dataclass(frozen=True)
class TrainConfig:
    architecture: str = "stan"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-6
    batch_size: int = 2048
    embedding_dim: int = 128
    user_embedding_dim: int | None = None
    item_embedding_dim: int | None = None
    expert_dim: int = 32
    expert_hidden: tuple[int, ...] = (64,)
    tower_hidden: tuple[int, ...] = (32,)
    bottom_hidden: tuple[int, ...] = (64,)
    num_specific_experts: int = 1
    num_shared_experts: int = 1
    ple_layers: int = 2
    epochs: int = 10
    seed: int = 0
    eta: tuple[float, ...] | None = None  # fixed task weights, baselines only
    gamma_mode: str = "sampled"  # or "posterior_mean"
    gamma_per_batch: bool = False
    pseudo_label_window_days: int | None = None
    pseudo_label_impute: str = "exclude"
    patience: int = 3

    @property
    def is_stan(self) -> bool:
        return self.architecture in ("stan", "stan_no_beta")

    def validate(self, num_tasks: int) -> None:
        from .models.backbone import ARCHITECTURES

        if self.architecture not in ARCHITECTURES:
            raise ConfigError(
                f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}"
            )
        for name in ("learning_rate", "adam_epsilon", "batch_size", "embedding_dim",
                     "expert_dim", "epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in (0,1)")
        if self.gamma_mode not in ("sampled", "posterior_mean"):
            raise ConfigError(f"unknown gamma_mode {self.gamma_mode!r}")
        if self.eta is not None:
            if self.is_stan:
                raise ConfigError("eta task weights apply only to non-STAN architectures")
            if len(self.eta) != num_tasks:
                raise ConfigError(f"eta must have {num_tasks} entries")

    def user_dim(self) -> int:
        return self.user_embedding_dim or self.embedding_dim

    def item_dim(self) -> int:
        return self.item_embedding_dim or self.embedding_dim


def backbone_config(cfg: TrainConfig, ds: Dataset) -> BackboneConfig:
    return BackboneConfig(
        num_tasks=ds.num_tasks,
        user_vocab_sizes=ds.user_vocab_sizes,
        item_vocab_sizes=ds.item_vocab_sizes,
        user_dim=cfg.user_dim(),
        item_dim=cfg.item_dim(),
        expert_dim=cfg.expert_dim,
        expert_hidden=cfg.expert_hidden,
        tower_hidden=cfg.tower_hidden,
        bottom_hidden=cfg.bottom_hidden,
        num_specific_experts=cfg.num_specific_experts,
        num_shared_experts=cfg.num_shared_experts,
        cgc_layers=cfg.ple_layers,
    )


@dataclass
class TrainState:
    config: TrainConfig
    task_names: tuple[str, ...]
    user_vocab_sizes: tuple[int, ...]
    item_vocab_sizes: tuple[int, ...]
    backbone: torch.nn.Module
    preference: PreferenceNet | None
    optimizer: torch.optim.Adam
    shuffle_rng: np.random.Generator
    epoch: int = 0
    posteriors: PosteriorStore | None = None
    stage_map: dict[str, int] | None = None
    stage_medians: np.ndarray | None = None
    best_epoch: int = -1
    best_score: float = -np.inf
    best_params: dict[str, torch.Tensor] | None = None
    history: list[dict] = field(default_factory=list)
    last_gamma: np.ndarray | None = None

    @property
    def arch(self) -> str:
        return self.config.architecture

    def named_params(self) -> dict[str, torch.nn.Parameter]:
        named = {f"backbone.{n}": p for n, p in self.backbone.named_parameters()}
        if self.preference is not None:
            named.update({f"preference.{n}": p for n, p in self.preference.named_parameters()})
        return named

    def snapshot_params(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.named_params().items()}

    def load_params(self, params: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for n, p in self.named_params().items():
                p.copy_(params[n])


def init_state(cfg: TrainConfig, ds_train: Dataset) -> TrainState:
    cfg.validate(ds_train.num_tasks)
    torch.manual_seed(cfg.seed)
    backbone = build_backbone(cfg.architecture, backbone_config(cfg, ds_train))
    preference = None
    if cfg.is_stan:
        preference = PreferenceNet(ds_train.user_vocab_sizes, cfg.user_dim(), ds_train.num_tasks)
    params = list(backbone.parameters())
    if preference is not None:
        params += list(preference.parameters())
    optimizer = torch.optim.Adam(
        params,
        lr=cfg.learning_rate,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_epsilon,
    )
    state = TrainState(
        config=cfg,
        task_names=ds_train.task_names,
        user_vocab_sizes=ds_train.user_vocab_sizes,
        item_vocab_sizes=ds_train.item_vocab_sizes,
        backbone=backbone,
        preference=preference,
        optimizer=optimizer,
        shuffle_rng=np.random.default_rng((cfg.seed, 17)),
    )
    if cfg.architecture == "stan":
        _, users = ds_train.user_index()
        state.posteriors = PosteriorStore(users, ds_train.num_tasks)
    if cfg.architecture == "ple_stage":
        stage_map = rule_stage_map(ds_train)
        state.stage_map = {u: int(s) for u, s in stage_map.items()}
        state.stage_medians = stage_medians(compute_user_aggregates(ds_train))
    return state


class _Batches:
    """Prepared training tensors (derived from the dataset, not checkpointed)."""

    def __init__(self, ds: Dataset, cfg: TrainConfig, state: TrainState, need_pseudo: bool = False):
        self.n = len(ds)
        self.user_feats = torch.from_numpy(ds.user_features)
        self.item_feats = torch.from_numpy(ds.item_features)
        self.labels = torch.from_numpy(ds.labels.astype(np.float32))
        self.user_rows, self.users = ds.user_index()
        self.stage_ids = None
        if state.stage_map is not None:
            self.stage_ids = torch.from_numpy(stage_ids_for(state, ds))
        self.pseudo = self.history_mask = None
        if need_pseudo and cfg.is_stan:
            pseudo, mask = compute_pseudo_labels(
                ds, cfg.pseudo_label_window_days, cfg.pseudo_label_impute
            )
            self.pseudo = torch.from_numpy(pseudo.astype(np.float32))
            self.history_mask = torch.from_numpy(mask)

    def slice(self, idx: np.ndarray):
        t = torch.from_numpy(idx)
        return (
            self.user_feats[t],
            self.item_feats[t],
            self.labels[t],
            None if self.stage_ids is None else self.stage_ids[t],
        )


def stage_ids_for(state: TrainState, ds: Dataset) -> np.ndarray:
    """Rule-stage id per record; unseen users get a stage from their own
    aggregate against the training medians."""
    if state.stage_map is None or state.stage_medians is None:
        raise ConfigError("state carries no stage information")
    mapping = dict(state.stage_map)
    missing = {str(u) for u in np.unique(ds.user_ids)} - set(mapping)
    if missing:
        for agg in compute_user_aggregates(ds):
            if agg.user_id in missing:
                mapping[agg.user_id] = int(
                    assign_rule_stage(agg, state.stage_medians, StageTaskOrder())
                )
    return np.array([mapping[str(u)] for u in ds.user_ids], dtype=np.int64)


def _preference_all(preference: PreferenceNet, user_feats: torch.Tensor, batch: int = 8192) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for b0 in range(0, len(user_feats), batch):
            outs.append(preference(user_feats[b0 : b0 + batch]).double().numpy())
    if not outs:
        return np.zeros((0, preference.num_tasks))
    return np.concatenate(outs, axis=0)


def refresh_posteriors(state: TrainState, data: _Batches) -> np.ndarray:
    """One chronological pass of the posterior recurrence with the current
    preference predictions, then one gamma per (user, task)."""
    assert state.posteriors is not None and state.preference is not None
    tilde = _preference_all(state.preference, data.user_feats)
    state.posteriors.rebuild(data.user_rows, tilde)
    if state.config.gamma_mode == "posterior_mean":
        gamma = state.posteriors.means()
    else:
        gamma = state.posteriors.sample_all(GammaStreams(state.config.seed, state.epoch))
    state.last_gamma = gamma
    return gamma


def train(
    ds_train: Dataset,
    ds_valid: Dataset,
    cfg: TrainConfig,
    state: TrainState | None = None,
    log_path: str | Path | None = None,
) -> TrainState:
    """Run (or resume) training; returns the state with the best-validation
    parameters restored."""
    if len(ds_train) == 0 or len(ds_valid) == 0:
        raise ConfigError("train and valid datasets must be nonempty")
    if state is None:
        state = init_state(cfg, ds_train)
    cfg = state.config
    data = _Batches(ds_train, cfg, state, need_pseudo=True)
    valid_data = _Batches(ds_valid, cfg, state)
    eta = np.ones(ds_train.num_tasks) if cfg.eta is None else np.asarray(cfg.eta)
    eta_t = torch.from_numpy(eta.astype(np.float32))

    while state.epoch < cfg.epochs:
        epoch = state.epoch
        gamma_rows = None
        if cfg.architecture == "stan":
            gamma = refresh_posteriors(state, data)
            gamma_rows = gamma[data.user_rows]
        task_sums = np.zeros(ds_train.num_tasks)
        pref_sums = np.zeros(ds_train.num_tasks)

        perm = state.shuffle_rng.permutation(data.n)
        for batch_i, b0 in enumerate(range(0, data.n, cfg.batch_size)):
            idx = perm[b0 : b0 + cfg.batch_size]
            uf, itf, y, sid = data.slice(idx)
            pred = state.backbone(uf, itf, sid)
            bce = per_sample_bce(pred, y)  # (B, K)

            tilde_b = None
            if cfg.is_stan:
                tilde_b = state.preference(uf)

            if cfg.architecture == "stan":
                if cfg.gamma_per_batch and cfg.gamma_mode == "sampled":
                    rng = np.random.default_rng((cfg.seed, 23, epoch, batch_i))
                    rows = data.user_rows[idx]
                    g = rng.beta(state.posteriors.alpha[rows], state.posteriors.beta[rows])
                    weights = torch.from_numpy(g.astype(np.float32))
                else:
                    weights = torch.from_numpy(gamma_rows[idx].astype(np.float32))
            elif cfg.architecture == "stan_no_beta":
                weights = tilde_b.detach()
            else:
                weights = eta_t

            task_terms = (bce * weights).sum(dim=0)  # (K,)
            loss = task_terms.sum()
            if cfg.is_stan:
                it = torch.from_numpy(idx)
                sq = (data.pseudo[it] - tilde_b) ** 2
                pref_terms = (sq * data.history_mask[it].unsqueeze(1)).sum(dim=0)
                loss = loss + pref_terms.sum()
                pref_sums += pref_terms.detach().double().numpy()
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_i}: {float(loss)}"
                )
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step()
            task_sums += task_terms.detach().double().numpy()

        score, val_aucs = _validation_score(state, valid_data)
        record = {
            "epoch": epoch,
            "train_task_loss": [float(v) for v in task_sums],
            "train_pref_loss": [float(v) for v in pref_sums],
            "valid_auc": val_aucs,
            "valid_auc_mean": score,
        }
        state.history.append(record)
        if log_path is not None:
            _append_log(log_path, state.task_names, record)

        state.epoch += 1
        if score is not None and score > state.best_score:
            state.best_score = score
            state.best_epoch = epoch
            state.best_params = state.snapshot_params()
        elif state.best_epoch >= 0 and epoch - state.best_epoch >= cfg.patience:
            break

    if state.best_params is not None:
        state.load_params(state.best_params)
    return state


def _validation_score(state: TrainState, valid: _Batches) -> tuple[float | None, list]:
    scores = _predict_batches(state, valid)
    labels = valid.labels.numpy()
    aucs: list[float | None] = []
    for j in range(scores.shape[1]):
        try:
            aucs.append(auc(scores[:, j], labels[:, j].astype(int)))
        except UndefinedMetricError:
            aucs.append(None)
    defined = [a for a in aucs if a is not None]
    if not defined:
        warnings.warn("validation AUC undefined for every task this epoch", stacklevel=2)
        return None, aucs
    return float(np.mean(defined)), aucs


def _predict_batches(state: TrainState, data: _Batches, batch: int = 8192) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for b0 in range(0, data.n, batch):
            idx = np.arange(b0, min(b0 + batch, data.n))
            uf, itf, _, sid = data.slice(idx)
            outs.append(state.backbone(uf, itf, sid).double().numpy())
    if not outs:
        return np.zeros((0, len(state.task_names)))
    return np.concatenate(outs, axis=0)


def predict_scores(state: TrainState, ds: Dataset) -> np.ndarray:
    """Model scores for a dataset, shape (N, K) float64."""
    return _predict_batches(state, _Batches(ds, state.config, state))


def predict_preferences(state: TrainState, ds: Dataset) -> np.ndarray:
    if state.preference is None:
        raise ConfigError(f"{state.arch} has no preference network")
    return _preference_all(state.preference, torch.from_numpy(ds.user_features))


def _append_log(path: str | Path, task_names: Sequence[str], record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as f:
        for j, task in enumerate(task_names):
            line = {
                "epoch": record["epoch"],
                "split": "train",
                "task": task,
                "loss": record["train_task_loss"][j],
                "pref_loss": record["train_pref_loss"][j],
                "auc": None,
            }
            f.write(json.dumps(line) + "\n")
            vline = {
                "epoch": record["epoch"],
                "split": "valid",
                "task": task,
                "loss": None,
                "auc": record["valid_auc"][j],
            }
            f.write(json.dumps(vline) + "\n")


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(state: TrainState, directory: str | Path, config_hash: str = "") -> None:
    """Write a resumable checkpoint: manifest + named-tensor containers +
    optimizer moments + rng state + posterior store."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = state.named_params()
    np.savez(directory / "params.npz", **{n: p.detach().numpy() for n, p in named.items()})
    if state.best_params is not None:
        np.savez(
            directory / "best_params.npz",
            **{n: t.numpy() for n, t in state.best_params.items()},
        )
    opt_arrays = {}
    for n, p in named.items():
        st = state.optimizer.state.get(p)
        if st:
            opt_arrays[f"step.{n}"] = np.asarray(_step_value(st["step"]), dtype=np.float64)
            opt_arrays[f"exp_avg.{n}"] = st["exp_avg"].numpy()
            opt_arrays[f"exp_avg_sq.{n}"] = st["exp_avg_sq"].numpy()
    np.savez(directory / "optimizer.npz", **opt_arrays)
    (directory / "rng.json").write_text(json.dumps(state.shuffle_rng.bit_generator.state))
    if state.posteriors is not None:
        state.posteriors.to_csv(directory / "posteriors.csv")
    manifest = {
        "arch": state.arch,
        "seed": state.config.seed,
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_score": None if state.best_score == -np.inf else state.best_score,
        "config": asdict(state.config),
        "task_names": list(state.task_names),
        "user_vocab_sizes": list(state.user_vocab_sizes),
        "item_vocab_sizes": list(state.item_vocab_sizes),
        "stage_map": state.stage_map,
        "stage_medians": None if state.stage_medians is None else list(map(float, state.stage_medians)),
        "config_hash": config_hash,
        "history": state.history,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _step_value(step) -> float:
    return float(step.item()) if torch.is_tensor(step) else float(step)


TUPLE_FIELDS = ("expert_hidden", "tower_hidden", "bottom_hidden", "eta")


def config_from_dict(d: dict) -> TrainConfig:
    kwargs = dict(d)
    for f in TUPLE_FIELDS:
        if kwargs.get(f) is not None:
            kwargs[f] = tuple(kwargs[f])
    return TrainConfig(**kwargs)


def load_checkpoint(directory: str | Path) -> TrainState:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = config_from_dict(manifest["config"])
    # a skeleton dataset supplies the dims needed to rebuild the modules
    skeleton = _SkeletonDims(
        task_names=tuple(manifest["task_names"]),
        user_vocab_sizes=tuple(manifest["user_vocab_sizes"]),
        item_vocab_sizes=tuple(manifest["item_vocab_sizes"]),
    )
    torch.manual_seed(cfg.seed)
    backbone = build_backbone(cfg.architecture, backbone_config(cfg, skeleton))
    preference = None
    if cfg.is_stan:
        preference = PreferenceNet(skeleton.user_vocab_sizes, cfg.user_dim(), skeleton.num_tasks)
    params = list(backbone.parameters())
    if preference is not None:
        params += list(preference.parameters())
    optimizer = torch.optim.Adam(
        params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_epsilon
    )
    state = TrainState(
        config=cfg,
        task_names=skeleton.task_names,
        user_vocab_sizes=skeleton.user_vocab_sizes,
        item_vocab_sizes=skeleton.item_vocab_sizes,
        backbone=backbone,
        preference=preference,
        optimizer=optimizer,
        shuffle_rng=np.random.default_rng(0),
        epoch=manifest["epoch"],
        best_epoch=manifest["best_epoch"],
        best_score=-np.inf if manifest["best_score"] is None else manifest["best_score"],
        stage_map=manifest["stage_map"],
        stage_medians=None
        if manifest["stage_medians"] is None
        else np.asarray(manifest["stage_medians"]),
        history=manifest.get("history", []),
    )
    with np.load(directory / "params.npz") as arrays:
        state.load_params({n: torch.from_numpy(arrays[n]) for n in arrays.files})
    best_path = directory / "best_params.npz"
    if best_path.exists():
        with np.load(best_path) as arrays:
            state.best_params = {n: torch.from_numpy(arrays[n].copy()) for n in arrays.files}
    with np.load(directory / "optimizer.npz") as arrays:
        named = state.named_params()
        for n, p in named.items():
            key = f"step.{n}"
            if key in arrays.files:
                state.optimizer.state[p] = {
                    "step": torch.tensor(float(arrays[key])),
                    "exp_avg": torch.from_numpy(arrays[f"exp_avg.{n}"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"exp_avg_sq.{n}"].copy()),
                }
    rng_state = json.loads((directory / "rng.json").read_text())
    state.shuffle_rng.bit_generator.state = rng_state
    posterior_path = directory / "posteriors.csv"
    if posterior_path.exists():
        state.posteriors = PosteriorStore.from_csv(posterior_path)
    return state


@dataclass(frozen=True)
class _SkeletonDims:
    task_names: tuple[str, ...]
    user_vocab_sizes: tuple[int, ...]
    item_vocab_sizes: tuple[int, ...]

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)
