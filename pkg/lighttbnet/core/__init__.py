"""Core functionality for the LightTBNet package."""

from .tensor import Tensor, no_grad, precision, gradcheck, set_default_dtype, get_default_dtype
from .layers import Module, Conv2D, BatchNorm2D, MaxPool2D, Linear, ReLU, Softmax
from .model import LightTBNet, ModelConfig, build, default_channel_plan, parameter_registry, state_registry
from .imaging import (ClaheConfig, AugmentConfig, PreprocessConfig, Preprocessor, load_image, clahe,
                      resize_bilinear, augment, normalize)
from .data import SampleRecord, SplitAssignment, load_manifest, stratified_split, batches, fold_batches
from .training import (FocalLossConfig, AdamConfig, TrainConfig, Adam, focal_loss, adam_step, train_fold,
                       train_all_folds)
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint, read_checkpoint
from .evaluation import (MetricsReport, PredictionSet, auc, classify_and_report, ensemble_scores, tpp_check,
                         cohort_breakdown)
from .efficiency import EfficiencyReport, count_macs, count_params, time_inference, emit_comparison
from .explain import Heatmap, saliency, gradcam, gradcam_from_activations, render_overlay
from .inference import load_ensemble, predict_image
from .config import RunConfig, resolve_run_config
from .server import mcp_server
from .cli import main

__all__ = [
    'Tensor', 'no_grad', 'precision', 'gradcheck', 'set_default_dtype', 'get_default_dtype',
    'Module', 'Conv2D', 'BatchNorm2D', 'MaxPool2D', 'Linear', 'ReLU', 'Softmax',
    'LightTBNet', 'ModelConfig', 'build', 'default_channel_plan', 'parameter_registry', 'state_registry',
    'ClaheConfig', 'AugmentConfig', 'PreprocessConfig', 'Preprocessor', 'load_image', 'clahe',
    'resize_bilinear', 'augment', 'normalize',
    'SampleRecord', 'SplitAssignment', 'load_manifest', 'stratified_split', 'batches', 'fold_batches',
    'FocalLossConfig', 'AdamConfig', 'TrainConfig', 'Adam', 'focal_loss', 'adam_step', 'train_fold',
    'train_all_folds',
    'Checkpoint', 'save_checkpoint', 'load_checkpoint', 'read_checkpoint',
    'MetricsReport', 'PredictionSet', 'auc', 'classify_and_report', 'ensemble_scores', 'tpp_check',
    'cohort_breakdown',
    'EfficiencyReport', 'count_macs', 'count_params', 'time_inference', 'emit_comparison',
    'Heatmap', 'saliency', 'gradcam', 'gradcam_from_activations', 'render_overlay',
    'load_ensemble', 'predict_image',
    'RunConfig', 'resolve_run_config',
    'mcp_server',
    'main',
]
