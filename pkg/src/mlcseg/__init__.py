"""Dependency-light engine and CLI for multi-level contextual segmentation.

A numpy-backed deep-learning stack for binary image segmentation: a
bottleneck-residual encoder with pyramid-dilated skip modules, reverse-mode
differentiation on an explicit tape, Adam training with binary
cross-entropy, k-fold evaluation, and a reproducible command-line workflow.

The ``MLCSEG_THREADS`` environment variable, when set before import, caps
BLAS parallelism (1 selects bit-reproducible single-threaded math). It seeds
the standard thread-count variables but never overrides ones already set.
"""

import os as _os

_threads = _os.environ.get("MLCSEG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (GroupSpec, HeadSpec, ModelConfig, PdcSpec, default_config,
                     load_config, save_config)
from .data import (FoldPlan, Sample, augment, kfold_split, load_dataset, load_sample,
                   save_dataset, stitch_tiles, synth_dataset, tile)
from .estimator import MLCSegmenter
from .metrics import (ConfusionCounts, EvalReport, aggregate, confusion, evaluate_pairs,
                      prf1, render_overlay)
from .network import (count_parameters, describe_model, encoder_conv_layer_count,
                      init_params, mlcnet_forward, pdc_module, predict_map,
                      receptive_field, residual_group, residual_unit, validate_params)
from .optim import (AdamState, TrainConfig, TrainResult, adam_step, bce_loss, init_adam,
                    train)
from .tensor import ConvSpec

__version__ = "0.1.0"

__all__ = [
    "AdamState", "ConfusionCounts", "ConvSpec", "EvalReport", "FoldPlan", "GroupSpec",
    "HeadSpec", "MLCSegmenter", "ModelConfig", "PdcSpec", "Sample", "TrainConfig",
    "TrainResult", "adam_step", "aggregate", "augment", "bce_loss", "confusion",
    "count_parameters", "default_config", "describe_model", "encoder_conv_layer_count",
    "evaluate_pairs", "init_adam", "init_params", "kfold_split", "load_checkpoint",
    "load_config", "load_dataset", "load_sample", "mlcnet_forward", "pdc_module",
    "predict_map", "prf1", "receptive_field", "render_overlay", "residual_group",
    "residual_unit", "save_checkpoint", "save_config", "save_dataset", "stitch_tiles",
    "synth_dataset", "tile", "train", "validate_params",
]
