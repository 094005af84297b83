"""Stage-adaptive multi-task recommendation toolkit."""

from .data import (
    ColumnSchema,
    Dataset,
    InteractionRecord,
    StageLabel,
    UserAggregate,
    assign_rule_stage,
    chronological_split,
    compute_pseudo_labels,
    compute_user_aggregates,
    equal_frequency_bin,
    ingest_csv,
)
from .metrics import MetricReport, ScoredGroup, auc, mean_ndcg, ndcg_at_k, relaimpr_auc, relaimpr_ndcg
from .stages import BetaPosterior, PosteriorStore, init_posterior, posterior_mean, sample_gamma, update_posterior
from .synthetic import GeneratorConfig, StageProfile, TransitionMatrix, generate, validate_statistics
from .training import TrainConfig, TrainState, task_loss, total_loss, train

__version__ = "0.1.0"
