"""Multimodal pre-training and fine-tuning for sequential recommendation.

Library surface: a numpy-backed autodiff kernel (`kernel`), data loading
and synthesis (`data`), the mixup sequence encoder (`model`), contrastive
and supervised objectives (`losses`), training loops (`training`),
full-ranking evaluation (`evaluation`), and a CLI (`cli`).
"""

from .data import (
    FeatureStore,
    InteractionDataset,
    build_instances,
    cold_item_partition,
    kcore_filter,
    leave_one_out_split,
    load_feature_store,
    load_interactions,
    make_batches,
    synth_generate,
    write_feature_store,
    write_interactions,
)
from .evaluation import MetricsReport, evaluate, export_loss_trajectory, ndcg_at_k, recall_at_k
from .kernel import Tape, Tensor, backward, gradient_check, make_rng, verify_mode
from .losses import cmcl_loss, finetune_loss, finetune_scores, nip_loss, pretrain_loss, similarity
from .model import (
    ItemFeatures,
    MixupConfig,
    ModelParams,
    complementary_mixup,
    create_model,
    m2se_forward,
    sequence_dropout,
    transformer_encode,
)
from .training import Adam, TrainConfig, TrainLog, ablation_table, finetune, grid_search, pretrain, run_variant

__version__ = "0.1.0"

__all__ = [
    "Adam", "FeatureStore", "InteractionDataset", "ItemFeatures", "MetricsReport",
    "MixupConfig", "ModelParams", "Tape", "Tensor", "TrainConfig", "TrainLog",
    "ablation_table", "backward", "build_instances", "cmcl_loss", "cold_item_partition",
    "complementary_mixup", "create_model", "evaluate", "export_loss_trajectory",
    "finetune", "finetune_loss", "finetune_scores", "gradient_check", "grid_search",
    "kcore_filter", "leave_one_out_split", "load_feature_store", "load_interactions",
    "m2se_forward", "make_batches", "make_rng", "ndcg_at_k", "nip_loss", "pretrain",
    "pretrain_loss", "recall_at_k", "run_variant", "sequence_dropout", "similarity",
    "synth_generate", "transformer_encode", "verify_mode", "write_feature_store",
    "write_interactions",
]
