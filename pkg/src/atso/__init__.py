"""Asynchronous teacher-student optimization (ATSO) for semi-supervised
segmentation, with its continual self-learning and synchronous (STSO)
baselines, desk-scale learners, synthetic tasks and noise analysis."""

from ._kernels import backend as kernel_backend
from .data import (DatasetBundle, GeneratorSpec, Image, LabelMap, PartitionSpec,
                   Sample, ShiftSpec, apply_domain_shift, gen_synthetic_task,
                   load_bundle, load_mask, partition_reference, save_bundle,
                   save_mask)
from .learners import (ArchSpec, Hyper, InitPolicy, Model, TrainItem, TrainSet,
                       ViewSpec, extract_features, fuse_majority, load_model,
                       predict, predict_multiview, save_model, train)
from .metrics import (ClassMapping, CrossEvalMatrix, MetricReport, class_iou,
                      cross_eval_matrix, dsc, global_dsc, miou, reduce_classes)
from .noise import (NoiseRecord, PropagationSpec, check_estimation_bound,
                    estimate_label_bias, simulate_error_propagation)
from .orchestrator import (GenerationReport, PseudoLabelStore, RunReport,
                           RunSettings, RunState, atso_generation,
                           final_merge_train, run, run_reduced_class_protocol,
                           run_transfer, self_learning_round, stso_round,
                           train_initial)

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "ClassMapping", "CrossEvalMatrix", "DatasetBundle",
    "GenerationReport", "GeneratorSpec", "Hyper", "Image", "InitPolicy",
    "LabelMap", "MetricReport", "Model", "NoiseRecord", "PartitionSpec",
    "PropagationSpec", "PseudoLabelStore", "RunReport", "RunSettings",
    "RunState", "Sample", "ShiftSpec", "TrainItem", "TrainSet", "ViewSpec",
    "apply_domain_shift", "atso_generation", "check_estimation_bound",
    "class_iou", "cross_eval_matrix", "dsc", "estimate_label_bias",
    "extract_features", "final_merge_train", "fuse_majority",
    "gen_synthetic_task", "global_dsc", "kernel_backend", "load_bundle",
    "load_mask", "load_model", "miou", "partition_reference", "predict",
    "predict_multiview", "reduce_classes", "run", "run_reduced_class_protocol",
    "run_transfer", "save_bundle", "save_mask", "save_model",
    "self_learning_round", "simulate_error_propagation", "stso_round", "train",
    "train_initial",
]
