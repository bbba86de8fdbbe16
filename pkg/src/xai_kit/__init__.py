"""Brain-tumour MRI classification with a from-scratch CNN, a class-weighted
loss for imbalanced data, and gradient, activation and perturbation based
explanations."""
from .cam import (CamConfig, ClassModelResult, Heatmap, class_model_visualization, faster_score_cam,
                  grad_cam, grad_cam_pp, render_overlay, score_cam, smoothgrad, vanilla_saliency)
from .data import DatasetSplit, ImageSample, load_dataset, load_image, resize_bilinear, split_dataset
from .errors import (BadMagicError, BuildError, CheckpointError, ContractError, DimensionError, EvaluationError,
                     IngestError, ShapeMismatchError, SolverError, TruncatedPayloadError, VersionMismatchError,
                     XaiKitError)
from .lime import (LimeConfig, LimeExplanation, SuperpixelMap, apply_mask, explain_lime, fit_surrogate,
                   render_lime_overlay, segment_superpixels)
from .losses import ClassWeights, compute_class_weights, log_loss, weighted_log_loss
from .metrics import ConfusionMatrix, Metrics, RocCurve, confusion, metrics_from_confusion, roc_auc
from .model import CnnModel, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainReport, evaluate, train

__version__ = "0.1.0"
