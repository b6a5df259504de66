"""Stage-aware block pruning and KV-cache transfer pruning for prefill/decode disaggregation."""

from .analysis import (RedundancyProfile, SetPartition, build_distillation_set, build_final_pruning_set,
                       build_initial_pruning_set, compute_pair_metric, compute_redundancy, partition,
                       redundancy_profile)
from .bound import PerturbationCase, error_bound
from .distill import DistillJob, distill_pair
from .kvprune import (KVSelectionPlan, TransferScenario, TransferVolume, head_score, layer_score,
                      select_layers, transfer_volume)
from .model import (KVCache, ModelConfig, TransformerModel, build_model, decode_step, forward_prefill,
                    greedy_generate)
from .plan import RemovalElement, StagePlan, build_view, stage_views
from .runtime import (reference_unified_run, run_decode_node, run_prefill_node, run_two_node,
                      transfer_metrics)
from .search import (AnnealingSchedule, SearchResult, assign_stages, brute_force_optimum,
                     run_annealing)
from .wire import deserialize_manifest, serialize_manifest

__version__ = "0.1.0"

__all__ = [
    "AnnealingSchedule", "DistillJob", "KVCache", "KVSelectionPlan", "ModelConfig", "PerturbationCase",
    "RedundancyProfile", "RemovalElement", "SearchResult", "SetPartition", "StagePlan",
    "TransferScenario", "TransferVolume", "TransformerModel", "assign_stages", "brute_force_optimum",
    "build_distillation_set", "build_final_pruning_set", "build_initial_pruning_set", "build_model",
    "build_view", "compute_pair_metric", "compute_redundancy", "decode_step", "deserialize_manifest",
    "distill_pair", "error_bound", "forward_prefill", "greedy_generate", "head_score", "layer_score",
    "partition", "redundancy_profile", "reference_unified_run", "run_annealing", "run_decode_node",
    "run_prefill_node", "run_two_node", "select_layers", "serialize_manifest", "stage_views",
    "transfer_metrics", "transfer_volume",
]
