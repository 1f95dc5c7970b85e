"""Pixel-level localization scoring: exact ROC, AUROC, best IOU, and the
reconstruction-difference baseline."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .attention import anomaly_attention, minmax_normalize
from .checkpoint import as_model
from .data import DatasetManifest
from .exceptions import PairingError
from .model import _as_input

METHODS = ("attention", "recon")


class UndefinedRocError(ValueError):
    """The pixel set has no positives or no negatives."""


@dataclass(frozen=True)
class ScoredPixelSet:
    scores: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).ravel()
        truth = np.asarray(self.truth).ravel()
        if scores.shape != truth.shape:
            raise ValueError(f"{scores.size} scores but {truth.size} labels")
        if not np.isin(truth, (0, 1)).all():
            raise ValueError("truth must be binary")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "truth", truth.astype(bool))

    @classmethod
    def pool(cls, maps, masks):
        """Concatenate every pixel of every image into one set."""
        maps = [np.asarray(m, dtype=np.float64).ravel() for m in maps]
        masks = [np.asarray(m).ravel() for m in masks]
        return cls(np.concatenate(maps), np.concatenate(masks))

    @property
    def n_pos(self):
        return int(self.truth.sum())

    @property
    def n_neg(self):
        return int(self.truth.size - self.truth.sum())


class RocCurve(NamedTuple):
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    tp: np.ndarray
    fp: np.ndarray


def roc_curve(pixels: ScoredPixelSet, max_thresholds=None) -> RocCurve:
    """Exact ROC: one point per distinct score (pixels with score >= t are positive).

    The first point is ``(0, 0)`` at threshold ``+inf``. ``max_thresholds``
    keeps only a quantile subsample of the distinct scores, an approximation
    for very large pixel sets; the ``(1, 1)`` endpoint is always retained.
    """
    n_pos, n_neg = pixels.n_pos, pixels.n_neg
    if n_pos == 0 or n_neg == 0:
        raise UndefinedRocError(f"ROC needs positives and negatives (got {n_pos}, {n_neg})")
    order = np.argsort(-pixels.scores, kind="mergesort")
    scores = pixels.scores[order]
    truth = pixels.truth[order]
    tps = np.cumsum(truth)
    fps = np.cumsum(~truth)
    # last index of each tie group
    ends = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    if max_thresholds is not None and ends.size > max_thresholds:
        pick = np.unique(np.linspace(0, ends.size - 1, max_thresholds).round().astype(int))
        ends = ends[pick]
    tp = np.r_[0, tps[ends]]
    fp = np.r_[0, fps[ends]]
    thresholds = np.r_[np.inf, scores[ends]]
    return RocCurve(thresholds, fp / n_neg, tp / n_pos, tp, fp)


def auroc(curve: RocCurve) -> float:
    """Trapezoidal area; equals the Mann-Whitney statistic with ties counted half."""
    return float(np.trapezoid(curve.tpr, curve.fpr))


def iou_curve(curve: RocCurve, n_pos):
    """``TP / (TP + FP + FN)`` at every ROC threshold."""
    return curve.tp / (curve.fp + n_pos)


def best_iou(pixels: ScoredPixelSet, curve: RocCurve | None = None):
    """Maximum IOU over the ROC thresholds and the (highest) threshold achieving it."""
    curve = curve if curve is not None else roc_curve(pixels)
    ious = iou_curve(curve, pixels.n_pos)[1:]
    k = int(np.argmax(ious))
    return float(ious[k]), float(curve.thresholds[1:][k])


def binarize(values, threshold):
    return (np.asarray(values) >= threshold).astype(np.uint8)


def recon_diff_map(x, x_hat):
    """Channel-averaged absolute difference; inputs ``(..., H, W, C)``."""
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return np.abs(x - x_hat).mean(axis=-1)


@torch.no_grad()
def reconstruct(model, images, batch_size=64):
    """Decode the posterior mean; returns ``(N, H, W, C)``."""
    model = as_model(model)
    x = _as_input(model, images)
    outs = []
    for start in range(0, len(x), batch_size):
        mu, _, _ = model.encode(x[start:start + batch_size])
        outs.append(model.decode(mu))
    return np.moveaxis(torch.cat(outs).numpy(), 1, -1)


@dataclass
class LocalizationReport:
    category: str
    method: str
    layer: str
    auroc: float
    best_iou: float
    best_threshold: float
    n_pos: int
    n_neg: int


def score_maps(maps, masks, *, category="", method="attention", layer="", normalize=True,
               max_thresholds=None) -> LocalizationReport:
    """Pool per-image maps against their masks and compute AUROC and best IOU."""
    maps = np.asarray(maps, dtype=np.float64)
    if normalize:
        maps = minmax_normalize(maps)
    pixels = ScoredPixelSet.pool(maps, masks)
    curve = roc_curve(pixels, max_thresholds=max_thresholds)
    iou, thr = best_iou(pixels, curve)
    return LocalizationReport(category, method, layer, auroc(curve), iou, thr,
                              pixels.n_pos, pixels.n_neg)


def localization_maps(model, images, method, layer=None, mode="sum-mu", stats=None, seed=0,
                      n_draws=16):
    """Raw (un-normalized) per-pixel anomaly maps ``(N, H, W)`` for one method."""
    if method == "attention":
        return anomaly_attention(model, images, mode, layer, stats, seed,
                                 n_draws=n_draws).values.reshape(
            len(images), *np.asarray(images).shape[1:3])
    if method == "recon":
        X = np.asarray(images)
        return recon_diff_map(X if X.ndim == 4 else X[..., None], reconstruct(model, images))
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def evaluate_category(model, test: DatasetManifest, method="both", layer=None, mode="sum-mu",
                      stats=None, seed=0, normalize=True, max_thresholds=None,
                      return_maps=False, n_draws=16):
    """Localization reports (one per method) for a test manifest with masks."""
    missing = [s.source_id for s in test if s.mask is None]
    if missing:
        raise PairingError("test samples without masks: " + ", ".join(missing[:10]))
    model = as_model(model)
    layer = layer or model.config.default_layer
    methods = METHODS if method == "both" else (method,)
    images, masks = test.images(), test.masks()
    reports, all_maps = [], {}
    for m in methods:
        maps = localization_maps(model, images, m, layer, mode, stats, seed, n_draws)
        all_maps[m] = maps
        reports.append(score_maps(maps, masks, category=test.category, method=m,
                                  layer=layer if m == "attention" else "",
                                  normalize=normalize, max_thresholds=max_thresholds))
    return (reports, all_maps) if return_maps else reports


REPORT_FIELDS = [f.name for f in fields(LocalizationReport)]


def write_report_csv(reports, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for r in reports:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in asdict(r).items()})
    return path


def read_report_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append(LocalizationReport(row["category"], row["method"], row["layer"],
                                      float(row["auroc"]), float(row["best_iou"]),
                                      float(row["best_threshold"]), int(row["n_pos"]),
                                      int(row["n_neg"])))
    return out
