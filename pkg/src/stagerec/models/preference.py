"""User preference network: predicts per-task inclination from user features.

Operates on the stacked user-slot embedding matrix U (d1 x d2) through a
self-attention unit, a per-task feature-importance attention, and one linear
head per task. Item features never enter, so two records of the same user
with the same user features get identical preference predictions.
"""

from __future__ import annotations

import math
import warnings

import torch
import torch.nn as nn

from ..errors import ConfigError
from .layers import init_embedding_, open_sigmoid


class PreferenceNet(nn.Module):
    def __init__(
        self,
        user_vocab_sizes: tuple[int, ...],
        user_dim: int,
        num_tasks: int,
        attention_axis: str = "features",
    ):
        super().__init__()
        if attention_axis not in ("features", "embedding"):
            raise ConfigError(f"attention_axis must be 'features' or 'embedding', got {attention_axis!r}")
        d1 = len(user_vocab_sizes)
        self.d1 = d1
        self.user_dim = user_dim
        self.num_tasks = num_tasks
        self.attention_axis = attention_axis
        # the preference net keeps its own embedding tables, separate from the backbone
        self.tables = nn.ModuleList(nn.Embedding(v, user_dim) for v in user_vocab_sizes)
        for t in self.tables:
            init_embedding_(t)
        bound = 1.0 / math.sqrt(d1)
        self.w_query = nn.Parameter(torch.empty(d1, d1).uniform_(-bound, bound))
        self.w_key = nn.Parameter(torch.empty(d1, d1).uniform_(-bound, bound))
        self.w_value = nn.Parameter(torch.empty(d1, d1).uniform_(-bound, bound))
        bound2 = 1.0 / math.sqrt(user_dim)
        self.task_weights = nn.Parameter(
            torch.empty(num_tasks, user_dim, user_dim).uniform_(-bound2, bound2)
        )
        self.heads = nn.ModuleList(nn.Linear(d1 * user_dim, 1) for _ in range(num_tasks))

    def user_matrix(self, user_feats: torch.Tensor) -> torch.Tensor:
        for slot, table in enumerate(self.tables):
            col = user_feats[:, slot]
            if col.numel() and (col.min() < 0 or col.max() >= table.num_embeddings):
                raise IndexError(f"user feature slot {slot}: index out of range")
        return torch.stack([t(user_feats[:, i]) for i, t in enumerate(self.tables)], dim=1)

    def self_attention(self, u: torch.Tensor) -> torch.Tensor:
        """Row-softmax attention over the d1 feature rows of U, scaled by
        1/sqrt(d1). Input and output are (B, d1, d2)."""
        q = torch.matmul(self.w_query, u)  # (B, d1, d2)
        k = torch.matmul(self.w_key, u)
        v = torch.matmul(self.w_value, u)
        scores = torch.matmul(q, k.transpose(1, 2)) / math.sqrt(self.d1)  # (B, d1, d1)
        return torch.matmul(torch.softmax(scores, dim=-1), v)

    def task_attention(self, u_prime: torch.Tensor, k: int) -> torch.Tensor:
        """Feature-importance reweighting for task k: softmax over the
        feature axis of U' W_k (per embedding column), applied elementwise."""
        scores = torch.matmul(u_prime, self.task_weights[k])  # (B, d1, d2)
        dim = 1 if self.attention_axis == "features" else 2
        return u_prime * torch.softmax(scores, dim=dim)

    def task_embeddings(self, user_feats: torch.Tensor) -> torch.Tensor:
        """Per-task attended user representations, shape (B, K, d1, d2)."""
        u_prime = self.self_attention(self.user_matrix(user_feats))
        return torch.stack(
            [self.task_attention(u_prime, k) for k in range(self.num_tasks)], dim=1
        )

    def forward(self, user_feats: torch.Tensor) -> torch.Tensor:
        """Preference predictions, shape (B, K), strictly inside (0,1)."""
        s = self.task_embeddings(user_feats)
        b = s.shape[0]
        logits = torch.cat(
            [self.heads[k](s[:, k].reshape(b, -1)) for k in range(self.num_tasks)], dim=1
        )
        return open_sigmoid(logits)


def preference_loss(
    pred: torch.Tensor, target: torch.Tensor, history_mask: torch.Tensor
) -> torch.Tensor:
    """Sum of squared (pseudo-label - prediction) over records with history.

    Masked (history-less) records contribute nothing; targets are constants
    with no gradient. Returns 0 with a warning when everything is masked.
    """
    if pred.shape != target.shape:
        raise ConfigError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    mask = history_mask.to(pred.dtype)
    if mask.dim() == 1:
        mask = mask.unsqueeze(-1)
    if pred.numel() and mask.sum() == 0:
        warnings.warn("preference_loss: every record is history-less; loss is 0", stacklevel=2)
    diff = (target.detach() - pred) * mask
    return (diff * diff).sum()
