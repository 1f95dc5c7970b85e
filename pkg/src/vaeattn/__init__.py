"""Gradient attention maps from VAE latent spaces for anomaly localization and
attention-disentangled representation learning."""

__version__ = "0.1.0"

from .attention import (AttentionMap, NormalDiffDistribution, NormalStats, aggregate,
                        anomaly_attention, anomaly_score, attention_for_dim, attention_set,
                        fit_normal_stats, normal_diff)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (DatasetManifest, FactorDataset, ImageSample, gen_defect_dataset,
                   gen_digit_dataset, gen_shapes_dataset, load_folder_dataset, load_idx_images)
from .disentangle import (AdConfig, attention_disentanglement_loss, disentanglement_metric,
                          train_ad_factorvae)
from .estimators import ADFactorVAE, AttentionVAE
from .metrics import LocalizationReport, auroc, best_iou, evaluate_category, roc_curve
from .model import ConvVAE, TrainConfig, VaeConfig, build_model, train_vae

__all__ = [
    "ADFactorVAE", "AdConfig", "AttentionMap", "AttentionVAE", "Checkpoint", "ConvVAE",
    "DatasetManifest", "FactorDataset", "ImageSample", "LocalizationReport",
    "NormalDiffDistribution", "NormalStats", "TrainConfig", "VaeConfig", "aggregate",
    "anomaly_attention", "anomaly_score", "attention_disentanglement_loss", "attention_for_dim",
    "attention_set", "auroc", "best_iou", "build_model", "disentanglement_metric",
    "evaluate_category", "fit_normal_stats", "gen_defect_dataset", "gen_digit_dataset",
    "gen_shapes_dataset", "load_checkpoint", "load_folder_dataset", "load_idx_images",
    "normal_diff", "roc_curve", "save_checkpoint", "train_ad_factorvae", "train_vae",
]
