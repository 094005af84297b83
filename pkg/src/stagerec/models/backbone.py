"""Multi-task prediction networks: STAN backbone and the baseline family."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import torch
import torch.nn as nn

from ..errors import ConfigError
from .layers import CgcLayer, EmbeddingTables, FeedForward, open_sigmoid

ARCHITECTURES = (
    "single_mlp",
    "shared_bottom",
    "mmoe",
    "ple",
    "ple_stage",
    "stan",
    "stan_no_beta",
)

NUM_STAGES = 4  # rule-stage vocabulary for ple_stage


@dataclass(frozen=True)
class BackboneConfig:
    num_tasks: int
    user_vocab_sizes: tuple[int, ...]
    item_vocab_sizes: tuple[int, ...]
    user_dim: int = 128
    item_dim: int = 128
    expert_dim: int = 32
    expert_hidden: tuple[int, ...] = (64,)
    tower_hidden: tuple[int, ...] = (32,)
    bottom_hidden: tuple[int, ...] = (64,)
    num_specific_experts: int = 1
    num_shared_experts: int = 1
    cgc_layers: int = 1  # stacked CGC depth for ple/ple_stage


class Towers(nn.Module):
    def __init__(self, num_tasks: int, in_dim: int, hidden: Sequence[int]):
        super().__init__()
        self.towers = nn.ModuleList(FeedForward(in_dim, hidden, 1) for _ in range(num_tasks))

    def forward(self, task_reps: Sequence[torch.Tensor]) -> torch.Tensor:
        logits = torch.cat([t(g) for t, g in zip(self.towers, task_reps)], dim=1)
        return open_sigmoid(logits)  # (B, K), strictly inside (0,1)


class SingleTaskMlps(nn.Module):
    """K isolated single-task models: no shared parameters at all."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.embeddings = nn.ModuleList(
            EmbeddingTables(cfg.user_vocab_sizes, cfg.item_vocab_sizes, cfg.user_dim, cfg.item_dim)
            for _ in range(cfg.num_tasks)
        )
        self.heads = nn.ModuleList(
            FeedForward(emb.out_dim, cfg.bottom_hidden, 1) for emb in self.embeddings
        )

    def forward(self, user_feats, item_feats, stage_ids=None) -> torch.Tensor:
        logits = torch.cat(
            [head(emb(user_feats, item_feats)) for emb, head in zip(self.embeddings, self.heads)],
            dim=1,
        )
        return open_sigmoid(logits)


class SharedBottom(nn.Module):
    """One shared trunk feeding per-task towers."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.embeddings = EmbeddingTables(
            cfg.user_vocab_sizes, cfg.item_vocab_sizes, cfg.user_dim, cfg.item_dim
        )
        self.bottom = FeedForward(self.embeddings.out_dim, cfg.bottom_hidden, cfg.expert_dim)
        self.towers = Towers(cfg.num_tasks, cfg.expert_dim, cfg.tower_hidden)

    def forward(self, user_feats, item_feats, stage_ids=None) -> torch.Tensor:
        rep = self.bottom(self.embeddings(user_feats, item_feats))
        return self.towers([rep] * len(self.towers.towers))


class MMoE(nn.Module):
    """Shared experts only, with a per-task softmax gate over all of them."""

    def __init__(self, cfg: BackboneConfig, num_experts: int | None = None):
        super().__init__()
        n = num_experts if num_experts is not None else cfg.num_shared_experts + cfg.num_specific_experts
        self.embeddings = EmbeddingTables(
            cfg.user_vocab_sizes, cfg.item_vocab_sizes, cfg.user_dim, cfg.item_dim
        )
        in_dim = self.embeddings.out_dim
        self.experts = nn.ModuleList(
            FeedForward(in_dim, cfg.expert_hidden, cfg.expert_dim) for _ in range(n)
        )
        self.gates = nn.ModuleList(
            nn.Linear(in_dim, n, bias=False) for _ in range(cfg.num_tasks)
        )
        self.towers = Towers(cfg.num_tasks, cfg.expert_dim, cfg.tower_hidden)

    def forward(self, user_feats, item_feats, stage_ids=None) -> torch.Tensor:
        x = self.embeddings(user_feats, item_feats)
        h = torch.stack([e(x) for e in self.experts], dim=1)  # (B, n, e)
        reps = []
        for gate in self.gates:
            w = torch.softmax(gate(x), dim=-1)  # (B, n)
            reps.append((w.unsqueeze(-1) * h).sum(dim=1))
        return self.towers(reps)


class PleNet(nn.Module):
    """Stacked CGC layers plus towers. One layer is the STAN backbone; more
    layers give the progressive-layered-extraction baseline. With
    `stage_feature=True` a rule-stage id is embedded as an extra user slot."""

    def __init__(self, cfg: BackboneConfig, stage_feature: bool = False):
        super().__init__()
        if cfg.cgc_layers < 1:
            raise ConfigError("cgc_layers must be >= 1")
        user_vocabs = cfg.user_vocab_sizes + ((NUM_STAGES,) if stage_feature else ())
        self.stage_feature = stage_feature
        self.embeddings = EmbeddingTables(
            user_vocabs, cfg.item_vocab_sizes, cfg.user_dim, cfg.item_dim
        )
        in_dim = self.embeddings.out_dim
        layers = []
        for i in range(cfg.cgc_layers):
            last = i == cfg.cgc_layers - 1
            layers.append(
                CgcLayer(
                    cfg.num_tasks,
                    in_dim if i == 0 else cfg.expert_dim,
                    cfg.expert_hidden,
                    cfg.expert_dim,
                    num_specific=cfg.num_specific_experts,
                    num_shared=cfg.num_shared_experts,
                    shared_gate=not last,
                )
            )
        self.cgc_layers = nn.ModuleList(layers)
        self.towers = Towers(cfg.num_tasks, cfg.expert_dim, cfg.tower_hidden)
        self.num_tasks = cfg.num_tasks

    def _inputs(self, user_feats, item_feats, stage_ids):
        if self.stage_feature:
            if stage_ids is None:
                raise ConfigError("this architecture needs stage_ids in forward()")
            user_feats = torch.cat([user_feats, stage_ids.reshape(-1, 1)], dim=1)
        return self.embeddings(user_feats, item_feats)

    def task_representations(self, user_feats, item_feats, stage_ids=None) -> list[torch.Tensor]:
        x = self._inputs(user_feats, item_feats, stage_ids)
        task_inputs = [x] * self.num_tasks
        shared = x
        for layer in self.cgc_layers:
            task_inputs, shared = layer(task_inputs, shared)
        return task_inputs

    def forward(self, user_feats, item_feats, stage_ids=None) -> torch.Tensor:
        return self.towers(self.task_representations(user_feats, item_feats, stage_ids))


def build_backbone(arch: str, cfg: BackboneConfig) -> nn.Module:
    if arch == "single_mlp":
        return SingleTaskMlps(cfg)
    if arch == "shared_bottom":
        return SharedBottom(cfg)
    if arch == "mmoe":
        return MMoE(cfg)
    if arch in ("ple", "ple_stage"):
        return PleNet(cfg, stage_feature=arch == "ple_stage")
    if arch in ("stan", "stan_no_beta"):
        # single CGC layer: shared experts are used sparingly up front
        return PleNet(replace(cfg, cgc_layers=1), stage_feature=False)
    raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
