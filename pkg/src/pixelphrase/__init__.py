"""Pixel-phrase grounding on synthetic panoptic scenes.

A numpy-backed stack: a small reverse-mode autodiff engine, a matching
model with iterative compatible-pixel aggregation, segmentation losses,
the recall-curve evaluation protocol, a deterministic scene generator
with a bit-exact bundle format, and a training loop.
"""

from .tensor import Tensor, tensor, zeros, ones
from .ops import (activation, sigmoid, relu, softmax, layer_norm, group_norm,
                  binned_max_indices, topk_indices, gather_pixels, concat,
                  linear, clip)
from .gradcheck import GradCheckReport, finite_diff_check
from .model import (ModelConfig, ModelParams, add_positional_encoding,
                    positional_encoding, project_round0, match, respond,
                    aggregation_round, forward, save_checkpoint,
                    load_checkpoint)
from .losses import (GroundTruth, LossConfig, LossBreakdown, bce_loss,
                     multilabel_view_loss, dice_loss, matching_loss,
                     total_loss)
from .metrics import (PhraseResult, RecallCurve, EvalReport, binarize,
                      average_word_maps, aggregate_plural, iou, recall_curve,
                      average_recall, split_report, evaluate,
                      write_curve_csv, write_report_json)
from .bundle import BundleError, read_tensors, write_tensors
from .synth import (SceneConfig, Sample, GenerationError, generate_scene,
                    generate_dataset, load_dataset, write_bundle, read_bundle,
                    codebooks)
from .train import (TrainConfig, TrainResult, AdamState, adam_step, lr_at,
                    train)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "tensor", "zeros", "ones",
    "activation", "sigmoid", "relu", "softmax", "layer_norm", "group_norm",
    "binned_max_indices", "topk_indices", "gather_pixels", "concat", "linear",
    "clip",
    "GradCheckReport", "finite_diff_check",
    "ModelConfig", "ModelParams", "add_positional_encoding",
    "positional_encoding", "project_round0", "match", "respond",
    "aggregation_round", "forward", "save_checkpoint", "load_checkpoint",
    "GroundTruth", "LossConfig", "LossBreakdown", "bce_loss",
    "multilabel_view_loss", "dice_loss", "matching_loss", "total_loss",
    "PhraseResult", "RecallCurve", "EvalReport", "binarize",
    "average_word_maps", "aggregate_plural", "iou", "recall_curve",
    "average_recall", "split_report", "evaluate", "write_curve_csv",
    "write_report_json",
    "BundleError", "read_tensors", "write_tensors",
    "SceneConfig", "Sample", "GenerationError", "generate_scene",
    "generate_dataset", "load_dataset", "write_bundle", "read_bundle",
    "codebooks",
    "TrainConfig", "TrainResult", "AdamState", "adam_step", "lr_at", "train",
]
