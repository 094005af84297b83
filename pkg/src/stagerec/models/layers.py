"""Shared building blocks: embeddings, feed-forward experts, CGC gating."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn as nn

from ..errors import ConfigError

MAX_HIDDEN_WIDTH = 1024


def open_sigmoid(logits: torch.Tensor) -> torch.Tensor:
    """Sigmoid clamped strictly inside (0,1), so downstream logs stay finite."""
    p = torch.sigmoid(logits)
    eps = 1e-12 if p.dtype == torch.float64 else 1e-7
    return p.clamp(eps, 1.0 - eps)


def check_widths(hidden: Sequence[int], max_width: int = MAX_HIDDEN_WIDTH) -> tuple[int, ...]:
    hidden = tuple(int(h) for h in hidden)
    if any(h < 1 for h in hidden):
        raise ConfigError(f"hidden widths must be positive, got {hidden}")
    if any(h > max_width for h in hidden):
        raise ConfigError(f"hidden width above the {max_width}-unit cap: {hidden}")
    return hidden


class FeedForward(nn.Module):
    """Linear stack with ReLU between layers, linear output."""

    def __init__(self, in_dim: int, hidden: Sequence[int], out_dim: int):
        super().__init__()
        hidden = check_widths(hidden)
        dims = [in_dim, *hidden, out_dim]
        layers: list[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.out_dim = out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def init_embedding_(table: nn.Embedding) -> None:
    # uniform scaled by the embedding width, mirroring nn.Linear's fan-in rule
    bound = 1.0 / math.sqrt(table.embedding_dim)
    nn.init.uniform_(table.weight, -bound, bound)


class EmbeddingTables(nn.Module):
    """Per-slot categorical embeddings; user slots share one width, item
    slots another. Forward returns the flat concatenation
    [user slot 0, ..., user slot d1-1, item slot 0, ...]."""

    def __init__(
        self,
        user_vocab_sizes: Sequence[int],
        item_vocab_sizes: Sequence[int],
        user_dim: int,
        item_dim: int,
    ):
        super().__init__()
        if any(v < 1 for v in (*user_vocab_sizes, *item_vocab_sizes)):
            raise ConfigError("every feature slot needs a positive vocab size")
        self.user_tables = nn.ModuleList(nn.Embedding(v, user_dim) for v in user_vocab_sizes)
        self.item_tables = nn.ModuleList(nn.Embedding(v, item_dim) for v in item_vocab_sizes)
        for t in (*self.user_tables, *self.item_tables):
            init_embedding_(t)
        self.user_dim = user_dim
        self.item_dim = item_dim
        self.out_dim = len(user_vocab_sizes) * user_dim + len(item_vocab_sizes) * item_dim

    def _check(self, feats: torch.Tensor, tables: nn.ModuleList, kind: str) -> None:
        if feats.shape[-1] != len(tables):
            raise ConfigError(f"expected {len(tables)} {kind} feature slots, got {feats.shape[-1]}")
        for slot, table in enumerate(tables):
            col = feats[..., slot]
            if col.numel() and (col.min() < 0 or col.max() >= table.num_embeddings):
                raise IndexError(
                    f"{kind} feature slot {slot}: index out of range "
                    f"[0, {table.num_embeddings})"
                )

    def user_matrix(self, user_feats: torch.Tensor) -> torch.Tensor:
        """Stacked user-slot embeddings, shape (B, d1, user_dim)."""
        self._check(user_feats, self.user_tables, "user")
        return torch.stack(
            [t(user_feats[:, i]) for i, t in enumerate(self.user_tables)], dim=1
        )

    def forward(self, user_feats: torch.Tensor, item_feats: torch.Tensor) -> torch.Tensor:
        self._check(user_feats, self.user_tables, "user")
        self._check(item_feats, self.item_tables, "item")
        parts = [t(user_feats[:, i]) for i, t in enumerate(self.user_tables)]
        parts += [t(item_feats[:, i]) for i, t in enumerate(self.item_tables)]
        return torch.cat(parts, dim=1)  # (B, d1*user_dim + d3*item_dim)


class CgcLayer(nn.Module):
    """Customized gate control: per-task specific experts plus shared experts,
    with a per-task softmax gate over (own specific + shared) outputs.

    Task k's gate never sees other tasks' specific experts, which is the
    structural sparsity the layer exists for. Non-final layers also carry a
    shared gate over all experts to produce the next layer's shared input.
    """

    def __init__(
        self,
        num_tasks: int,
        in_dim: int,
        expert_hidden: Sequence[int],
        expert_dim: int,
        num_specific: int = 1,
        num_shared: int = 1,
        shared_gate: bool = False,
    ):
        super().__init__()
        if num_specific < 1:
            raise ConfigError("need at least one specific expert per task")
        if num_shared < 0:
            raise ConfigError("num_shared must be nonnegative")
        self.num_tasks = num_tasks
        self.num_specific = num_specific
        self.num_shared = num_shared
        self.specific = nn.ModuleList(
            nn.ModuleList(
                FeedForward(in_dim, expert_hidden, expert_dim) for _ in range(num_specific)
            )
            for _ in range(num_tasks)
        )
        self.shared = nn.ModuleList(
            FeedForward(in_dim, expert_hidden, expert_dim) for _ in range(num_shared)
        )
        self.gates = nn.ModuleList(
            nn.Linear(in_dim, num_specific + num_shared, bias=False) for _ in range(num_tasks)
        )
        self.shared_gate_layer = (
            nn.Linear(in_dim, num_tasks * num_specific + num_shared, bias=False)
            if shared_gate
            else None
        )
        self.out_dim = expert_dim

    @property
    def total_experts(self) -> int:
        return self.num_tasks * self.num_specific + self.num_shared

    def forward(
        self,
        task_inputs: Sequence[torch.Tensor],
        shared_input: torch.Tensor,
    ) -> tuple[list[torch.Tensor], torch.Tensor | None]:
        shared_outs = [e(shared_input) for e in self.shared]
        all_specific: list[torch.Tensor] = []
        task_outs = []
        for k in range(self.num_tasks):
            outs = [e(task_inputs[k]) for e in self.specific[k]]
            all_specific += outs
            h = torch.stack(outs + shared_outs, dim=1)  # (B, n_sp+n_sh, e)
            w = torch.softmax(self.gates[k](task_inputs[k]), dim=-1)  # (B, n_sp+n_sh)
            task_outs.append((w.unsqueeze(-1) * h).sum(dim=1))  # (B, e)

        shared_out = None
        if self.shared_gate_layer is not None:
            h = torch.stack(all_specific + shared_outs, dim=1)
            w = torch.softmax(self.shared_gate_layer(shared_input), dim=-1)
            shared_out = (w.unsqueeze(-1) * h).sum(dim=1)
        return task_outs, shared_out

    def gate_distribution(self, k: int, task_input: torch.Tensor) -> torch.Tensor:
        """Gate weights of task k laid out over the layer's full expert bank
        (all tasks' specific experts first, then shared); entries for other
        tasks' specific experts are structurally zero."""
        w = torch.softmax(self.gates[k](task_input), dim=-1)
        batch = task_input.shape[0]
        full = torch.zeros(batch, self.total_experts, dtype=w.dtype, device=w.device)
        start = k * self.num_specific
        full[:, start : start + self.num_specific] = w[:, : self.num_specific]
        if self.num_shared:
            full[:, self.num_tasks * self.num_specific :] = w[:, self.num_specific :]
        return full
