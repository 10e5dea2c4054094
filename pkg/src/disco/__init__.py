"""Distributed DNN inference with sparse inter-node communication.

Within-layer model parallelism splits every layer's input and output
features across N nodes; each cross-node feature transmission corresponds to
one sub-row of kernels, so pruning sub-rows sparsifies communication and
computation together. The package models the resulting latency, selects
sub-rows to prune, simulates the node protocol, and trains models through an
iterative prune-and-finetune schedule.
"""

from .autodiff import gradient_check, model_forward_backward
from .data import (SyntheticDataset, load_idx_dataset, load_idx_images,
                   load_idx_labels, load_tensor, save_tensor, synthetic_dataset)
from .forward import forward_model
from .latency import (PRESETS, LatencyReport, SystemConfig, comm_latency,
                      comp_latency, equilibrium_csv_text, equilibrium_mapping,
                      equilibrium_profile, equilibrium_scomm, model_latency,
                      resolve_system)
from .masks import (BlockMask, CommPlan, MaskError, apply_mask, commplan_to_mask,
                    load_mask, mask_to_commplan, memory_estimate, pattern_dense,
                    pattern_independent, save_mask, scomm_from_scomp,
                    scomp_from_scomm, select_subrows, sparsity_stats)
from .model import (LayerSpec, ModelSpec, load_model, resnet50_shapes,
                    resolve_model, save_model, toy_cnn_shapes)
from .simulate import (DistProtocolError, TimingTrace, max_relative_error,
                       partition_weights, run_distributed, simulate,
                       verify_against_centralized)
from .train import (StageResult, TrainConfig, TrainError, TrainResult, evaluate,
                    finetune_masked, iterative_disco, load_train_config,
                    save_train_config, train_dense)
from .weights import WeightStore, init_weights, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "BlockMask", "CommPlan", "DistProtocolError", "LatencyReport", "LayerSpec",
    "MaskError", "ModelSpec", "PRESETS", "StageResult", "SyntheticDataset",
    "SystemConfig", "TimingTrace", "TrainConfig", "TrainError", "TrainResult",
    "WeightStore", "apply_mask", "comm_latency", "commplan_to_mask",
    "comp_latency", "equilibrium_csv_text", "equilibrium_mapping",
    "equilibrium_profile", "equilibrium_scomm", "evaluate", "finetune_masked",
    "forward_model", "gradient_check", "init_weights", "iterative_disco",
    "load_idx_dataset", "load_idx_images", "load_idx_labels", "load_mask",
    "load_model", "load_tensor", "load_train_config", "load_weights",
    "mask_to_commplan", "max_relative_error", "memory_estimate",
    "model_forward_backward", "model_latency", "partition_weights",
    "pattern_dense", "pattern_independent", "resnet50_shapes", "resolve_model",
    "resolve_system", "run_distributed", "save_mask", "save_model",
    "save_tensor", "save_train_config", "save_weights", "scomm_from_scomp",
    "scomp_from_scomm", "select_subrows", "simulate", "sparsity_stats",
    "synthetic_dataset", "toy_cnn_shapes", "train_dense",
    "verify_against_centralized",
]
