"""Attention-based feature distillation for CIFAR-style ResNet / WRN students."""
from .errors import ConfigError, DegenerateInputError, IngestionError, NumericError, ShapeError
from .losses import (
    DistanceMetric, LinkKind, LinkStrategy, LossWeights, PoolingMethod, afd_loss,
    build_fixed_links, channel_pool_normalize, kd_loss, pairwise_distance, resample_student,
    total_loss,
)
from .meta import MetaParams, attention_matrix, global_avg_pool, init_meta
from .models import (
    CandidateSet, FeatureCandidate, Family, NetworkArchitecture, build_network,
    forward_with_candidates, select_candidates,
)
from .train import (
    ExperimentConfig, RunRecord, Schedule, desk_config, pretrain_teacher, run_distillation,
    sweep_beta,
)
from .cli import AblationKind, Command, export_attention, parse_args, run_ablation

__version__ = "0.1.0"
