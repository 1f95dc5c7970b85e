"""Gradient attention from the latent space of a VAE.

For a latent scalar (``z_i``, ``mu_i`` or an anomaly score) the gradient with
respect to a tap's activations ``A`` (``n x h x w``) is average-pooled into one
weight per channel, and the map is ``ReLU(sum_k alpha_k A_k)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .checkpoint import as_model
from .exceptions import DisconnectedTapError, FormatError
from .model import LatentDistribution, _as_input, make_generator

SAMPLING = ("mu", "z")
MODES = ("sum-mu", "normal-diff")


@dataclass
class FeatureTap:
    layer: str
    activations: torch.Tensor
    grad: torch.Tensor | None = None


@dataclass
class AttentionMap:
    """Nonnegative response map(s); ``values`` is ``(h, w)`` or ``(N, h, w)``."""

    values: np.ndarray
    latent_index: int | str
    layer: str

    @property
    def shape(self):
        return self.values.shape


class NormalStats(NamedTuple):
    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class NormalDiffDistribution:
    """Per-dimension Gaussian of the normal-minus-test embedding difference."""

    mean: np.ndarray
    var: np.ndarray

    def pdf(self, u):
        u = np.asarray(u, dtype=np.float64)
        return np.exp(-(u - self.mean) ** 2 / (2 * self.var)) / np.sqrt(2 * np.pi * self.var)

    def sample(self, n=None, seed=0, dtype=torch.float64):
        """Draw codes; shape ``(n, *mean.shape)`` or ``mean.shape`` when ``n`` is None."""
        mean = torch.as_tensor(self.mean, dtype=dtype)
        std = torch.as_tensor(np.sqrt(self.var), dtype=dtype)
        shape = mean.shape if n is None else (n, *mean.shape)
        eps = torch.randn(shape, generator=make_generator(seed), dtype=dtype)
        return mean + std * eps


# ---------------------------------------------------------------------------
# Primitive steps

def backprop_to_tap(target, activations, *, create_graph=False, retain_graph=True):
    """Exact ``d target / d activations``; parameters' ``.grad`` is left untouched."""
    if not target.requires_grad:
        raise DisconnectedTapError("target does not depend on any tracked tensor")
    (grad,) = torch.autograd.grad(target, activations, retain_graph=retain_graph,
                                  create_graph=create_graph, allow_unused=True)
    if grad is None:
        raise DisconnectedTapError("tap activations are not part of the target's graph")
    return grad


def channel_weights(grad):
    """Global average pool over the two trailing spatial axes."""
    return grad.mean(dim=(-2, -1))


def combine_channels(alpha, activations):
    return F.relu((alpha[..., None, None] * activations).sum(dim=-3))


def gradient_attention(target, activations, *, create_graph=False, retain_graph=True):
    grad = backprop_to_tap(target, activations, create_graph=create_graph,
                           retain_graph=retain_graph)
    return combine_channels(channel_weights(grad), activations)


def latent_targets(dist: LatentDistribution, sampling="mu", seed=0, noise=None):
    """``mu`` or a reparameterized sample ``z``; returns ``(targets, noise)``."""
    if sampling == "mu":
        return dist.mu, None
    if sampling != "z":
        raise ValueError(f"sampling must be one of {SAMPLING}, got {sampling!r}")
    if noise is None:
        noise = torch.randn(dist.mu.shape, generator=make_generator(seed), dtype=dist.mu.dtype)
    return dist.mu + dist.sigma * noise, noise


def _resolve_layer(model, layer):
    layer = layer or model.config.default_layer
    if layer not in model.config.tap_layers:
        raise DisconnectedTapError(f"layer {layer!r} is not a configured tap "
                                   f"({', '.join(model.config.tap_layers)})")
    return layer


def latent_attention(model, x, layer=None, *, sampling="mu", seed=0, dims=None,
                     noise=None, create_graph=False):
    """Per-dimension maps for a batch as a tensor ``(B, len(dims), h, w)``.

    One forward pass; one backward pass per requested latent dimension. Each
    backward sums the target over the batch, which is exact because samples
    never interact inside the network.
    """
    layer = _resolve_layer(model, layer)
    mu, logvar, taps = model.encode(x)
    dist = LatentDistribution(mu, logvar)
    targets, noise = latent_targets(dist, sampling, seed, noise)
    A = taps[layer]
    dims = range(dist.dim) if dims is None else dims
    maps = [gradient_attention(targets[:, i].sum(), A, create_graph=create_graph)
            for i in dims]
    return torch.stack(maps, dim=1), dist, targets


def _to_map(values, index, layer, single):
    arr = values.detach().cpu().numpy()
    return AttentionMap(arr[0] if single else arr, index, layer)


def _is_single(model, images):
    if isinstance(images, torch.Tensor):
        return images.dim() == 3
    arr = np.asarray(images)
    return arr.ndim == 2 or (arr.ndim == 3 and arr.shape == tuple(model.config.input_shape))


# ---------------------------------------------------------------------------
# Public map generators

def attention_for_dim(model, images, i, layer=None, sampling="mu", seed=0) -> AttentionMap:
    model = as_model(model)
    if not 0 <= i < model.config.latent_dim:
        raise IndexError(f"latent index {i} out of range for D={model.config.latent_dim}")
    layer = _resolve_layer(model, layer)
    maps, _, _ = latent_attention(model, _as_input(model, images), layer, sampling=sampling,
                                  seed=seed, dims=[i])
    return _to_map(maps[:, 0], i, layer, _is_single(model, images))


def attention_set(model, images, layer=None, sampling="mu", seed=0) -> list[AttentionMap]:
    """One map per latent dimension from a single forward pass."""
    model = as_model(model)
    layer = _resolve_layer(model, layer)
    maps, _, _ = latent_attention(model, _as_input(model, images), layer, sampling=sampling,
                                  seed=seed)
    single = _is_single(model, images)
    return [_to_map(maps[:, i], i, layer, single) for i in range(maps.shape[1])]


def aggregate(maps: Sequence, scheme="mean") -> AttentionMap:
    if scheme != "mean":
        raise ValueError(f"unsupported aggregation scheme {scheme!r}")
    if not maps:
        raise ValueError("cannot aggregate an empty set of maps")
    values = [m.values if isinstance(m, AttentionMap) else np.asarray(m) for m in maps]
    shapes = {v.shape for v in values}
    if len(shapes) != 1:
        raise ValueError(f"maps have different shapes: {sorted(shapes)}")
    layer = maps[0].layer if isinstance(maps[0], AttentionMap) else ""
    return AttentionMap(np.mean(np.stack(values), axis=0), "aggregate", layer)


def anomaly_score(dist: LatentDistribution, absolute=False):
    """Sum of the posterior mean vector (per sample)."""
    mu = dist.mu if isinstance(dist, LatentDistribution) else torch.as_tensor(dist)
    s = mu.sum(dim=-1)
    return s.abs() if absolute else s


@torch.no_grad()
def fit_normal_stats(model, images, batch_size=64) -> NormalStats:
    """Population mean and standard deviation of embeddings of normal images.

    The population variance combines the average posterior variance with the
    spread of posterior means (law of total variance).
    """
    model = as_model(model)
    x = _as_input(model, images)
    mus, vars_ = [], []
    for start in range(0, len(x), batch_size):
        mu, logvar, _ = model.encode(x[start:start + batch_size])
        mus.append(mu.double())
        vars_.append(logvar.double().exp())
    mu = torch.cat(mus)
    var = torch.cat(vars_)
    mean = mu.mean(0)
    total = var.mean(0) + (mu - mean).pow(2).mean(0)
    return NormalStats(mean.numpy(), total.sqrt().numpy())


def normal_diff(stats: NormalStats, dist_y) -> NormalDiffDistribution:
    if isinstance(dist_y, LatentDistribution):
        mu_y = dist_y.mu.detach().double().numpy()
        var_y = dist_y.var.detach().double().numpy()
    else:
        mu_y, sigma_y = (np.asarray(a, dtype=np.float64) for a in dist_y)
        var_y = sigma_y ** 2
    if mu_y.shape[-1] != len(stats.mu):
        raise ValueError(f"dimension mismatch: stats D={len(stats.mu)}, sample D={mu_y.shape[-1]}")
    return NormalDiffDistribution(stats.mu - mu_y, stats.sigma ** 2 + var_y)


def upsample(maps, size):
    """Bilinear resize of ``(B, h, w)`` maps to ``size``."""
    return F.interpolate(maps[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]


def anomaly_attention(model, images, mode="sum-mu", layer=None, stats: NormalStats | None = None,
                      seed=0, *, absolute=False, upsample_to_input=True,
                      batch_size=32, n_draws=16) -> AttentionMap:
    """Anomaly attention at input resolution.

    ``sum-mu`` differentiates the summed mean vector. ``normal-diff`` draws
    ``z*`` from the normal-difference distribution of each image, takes the
    displacement ``d = -z*`` (test minus normal) and averages the
    per-dimension maps of the targets ``d_i * mu_i``, so each map shows the
    features pushing the embedding away from the normal population.
    ``n_draws`` averages the resulting map over that many independent draws.

    The tap gradient of ``d_i * mu_i`` is ``d_i`` times that of ``mu_i``, so
    one backward pass per dimension serves every draw.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "normal-diff" and stats is None:
        raise ValueError("normal-diff mode requires NormalStats from fit_normal_stats")
    if n_draws < 1:
        raise ValueError(f"n_draws must be at least 1, got {n_draws}")
    model = as_model(model)
    layer = _resolve_layer(model, layer)
    single = _is_single(model, images)
    x = _as_input(model, images)
    gen = make_generator(seed)
    out = []
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        mu, logvar, taps = model.encode(xb)
        dist = LatentDistribution(mu, logvar)
        A = taps[layer]
        if mode == "sum-mu":
            maps = gradient_attention(anomaly_score(dist, absolute).sum(), A, retain_graph=False)
        else:
            # displacement of this embedding from the normal population
            shift = -normal_diff(stats, dist).sample(n_draws, seed=gen, dtype=mu.dtype)
            signed = torch.stack([
                (channel_weights(backprop_to_tap(mu[:, i].sum(), A))[..., None, None]
                 * A).sum(dim=-3) for i in range(dist.dim)], dim=1)
            maps = F.relu(shift[..., None, None] * signed).mean(dim=(0, 2)).detach()
        if upsample_to_input:
            maps = upsample(maps, model.config.input_shape[:2])
        out.append(maps.detach())
    values = torch.cat(out)
    return _to_map(values, "aggregate", layer, single)


def minmax_normalize(values, eps=0.0):
    """Scale each trailing ``(h, w)`` map to [0, 1]; constant maps become zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min(axis=(-2, -1), keepdims=True)
    span = values.max(axis=(-2, -1), keepdims=True) - lo
    return np.where(span > eps, (values - lo) / np.where(span > eps, span, 1.0), 0.0)


# ---------------------------------------------------------------------------
# Export: 8-bit PNG heatmaps and raw dumps
#
# Raw layout (little-endian): b"AMAP", uint32 version, uint32 ndim,
# ndim x uint32 shape, then float64 values in row-major order.

RAW_MAGIC = b"AMAP"


def to_uint8(values):
    return np.round(minmax_normalize(values) * 255).astype(np.uint8)


def save_map_png(values, path):
    Image.fromarray(to_uint8(values)).save(path)
    return Path(path)


def save_raw_map(values, path):
    values = np.ascontiguousarray(values, dtype="<f8")
    header = RAW_MAGIC + struct.pack("<II", 1, values.ndim) + struct.pack(f"<{values.ndim}I",
                                                                        *values.shape)
    Path(path).write_bytes(header + values.tobytes())
    return Path(path)


def load_raw_map(path):
    data = Path(path).read_bytes()
    if data[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: not a raw attention map")
    version, ndim = struct.unpack("<II", data[4:12])
    if version != 1:
        raise FormatError(f"{path}: unsupported raw map version {version}")
    shape = struct.unpack(f"<{ndim}I", data[12:12 + 4 * ndim])
    offset = 12 + 4 * ndim
    count = int(np.prod(shape))
    if len(data) - offset != 8 * count:
        raise FormatError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
