"""Fairness-regularized contrastive pre-training with Sinkhorn distances."""

from .contrastive import (EmbeddingBatch, FairClipConfig, FairClipResult, SimilarityMatrix,
                          clip_loss, fairclip_loss, similarity)
from .data import AttributeSchema, BatchSpec, Dataset, GroupPartition, Sample
from .encoders import Checkpoint, EncoderParams, OptimizerState
from .metrics import EvaluationReport, Predictions, auc, deodds, dpd, es_auc, groupwise_auc
from .ot import (CostMatrix, EmpiricalDistribution, SinkhornConfig, TransportPlan,
                 exact_wasserstein_1d, sinkhorn_distance, sinkhorn_plan)

__version__ = "0.1.0"

__all__ = [
    "AttributeSchema", "BatchSpec", "Checkpoint", "CostMatrix", "Dataset", "EmbeddingBatch",
    "EmpiricalDistribution", "EncoderParams", "EvaluationReport", "FairClipConfig",
    "FairClipResult", "GroupPartition", "OptimizerState", "Predictions", "Sample",
    "SimilarityMatrix", "SinkhornConfig", "TransportPlan", "auc", "clip_loss", "deodds", "dpd",
    "es_auc", "exact_wasserstein_1d", "fairclip_loss", "groupwise_auc", "similarity",
    "sinkhorn_distance", "sinkhorn_plan",
]
