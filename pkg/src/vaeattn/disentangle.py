"""FactorVAE training with the attention disentanglement loss, and the
majority-vote disentanglement metric.

The attention maps entering the loss keep their autograd graph
(``create_graph=True``), so the loss gradient reaches the encoder through
both the channel weights and the activations: a double backward pass.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import gradient_attention, latent_attention
from .checkpoint import Checkpoint, as_model
from .data import FactorDataset
from .exceptions import DivergenceError, UnsupportedConfigurationError
from .model import (ConvVAE, LatentDistribution, TrainConfig, VaeConfig, batch_schedule,
                    build_model, vae_loss)
from .validation import check_images, to_tensor


@dataclass
class AdConfig:
    """Attention-disentanglement settings.

    ``pair_selection`` is ``"top2"`` (two largest ``|z_i|`` per sample),
    ``"all"`` (mean over every unordered pair) or a fixed ``(i, j)`` tuple.
    ``layer=None`` uses the last encoder tap.
    """

    ad_lambda: float = 1.0
    pair_selection: str | tuple = "top2"
    layer: str | None = None
    normalization: str = "none"
    sampling: str = "z"

    def __post_init__(self):
        if self.ad_lambda < 0:
            raise ValueError("ad_lambda must be >= 0")
        if isinstance(self.pair_selection, (list, tuple)):
            i, j = self.pair_selection
            if i == j or min(i, j) < 0:
                raise ValueError(f"invalid fixed pair {self.pair_selection}")
            self.pair_selection = (int(i), int(j))
        elif self.pair_selection not in ("top2", "all"):
            raise ValueError(f"unknown pair selection {self.pair_selection!r}")
        if self.normalization not in ("none", "sum"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        if self.sampling not in ("z", "mu"):
            raise ValueError(f"unknown sampling {self.sampling!r}")


# ---------------------------------------------------------------------------
# The loss

def attention_disentanglement_loss(a1, a2):
    """Soft overlap ``2 sum(min(a1, a2)) / sum(a1 + a2)`` over the last two axes.

    Zero when both maps are identically zero. Leading axes are batch axes.
    """
    a1 = torch.as_tensor(a1)
    a2 = torch.as_tensor(a2, dtype=a1.dtype)
    if a1.shape != a2.shape:
        raise ValueError(f"map shapes differ: {tuple(a1.shape)} vs {tuple(a2.shape)}")
    if (a1 < 0).any() or (a2 < 0).any():
        raise ValueError("attention maps must be nonnegative")
    overlap = torch.minimum(a1, a2).sum(dim=(-2, -1))
    total = (a1 + a2).sum(dim=(-2, -1))
    safe = torch.where(total > 0, total, torch.ones_like(total))
    return torch.where(total > 0, 2.0 * overlap / safe, torch.zeros_like(total))


def select_attention_pair(z, selection="top2"):
    """Pick latent dimensions whose maps are pushed apart.

    For a single code returns ``(i, j)``; for a ``(B, D)`` batch returns a
    ``(B, 2)`` index array (top2/fixed) or the list of all pairs.
    """
    if isinstance(selection, AdConfig):
        selection = selection.pair_selection
    z = np.asarray(z.detach() if isinstance(z, torch.Tensor) else z, dtype=np.float64)
    d = z.shape[-1]
    if d < 2:
        raise ValueError("pair selection needs at least two latent dimensions")
    if selection == "all":
        return list(itertools.combinations(range(d), 2))
    if isinstance(selection, tuple):
        i, j = selection
        if max(i, j) >= d:
            raise ValueError(f"fixed pair {selection} out of range for D={d}")
        pair = np.array([i, j])
    elif selection == "top2":
        order = np.argsort(-np.abs(z), axis=-1, kind="stable")
        pair = order[..., :2]
        return tuple(int(v) for v in pair) if z.ndim == 1 else pair
    else:
        raise ValueError(f"unknown pair selection {selection!r}")
    return (int(pair[0]), int(pair[1])) if z.ndim == 1 else np.tile(pair, (len(z), 1))


def _normalize_maps(maps, how):
    if how == "none":
        return maps
    total = maps.sum(dim=(-2, -1), keepdim=True)
    return maps / torch.where(total > 0, total, torch.ones_like(total))


def pair_overlap(maps, z, selection="top2"):
    """Mean L_AD over the batch for the selected pair(s). ``maps`` is ``(B, D, h, w)``."""
    pairs = select_attention_pair(z, selection)
    if selection == "all":
        i, j = (torch.tensor(v) for v in zip(*pairs))
        return attention_disentanglement_loss(maps[:, i], maps[:, j]).mean()
    idx = torch.as_tensor(pairs)
    rows = torch.arange(len(maps))
    return attention_disentanglement_loss(maps[rows, idx[:, 0]], maps[rows, idx[:, 1]]).mean()


# ---------------------------------------------------------------------------
# FactorVAE pieces

class TcDiscriminator(nn.Module):
    """MLP classifying codes as joint (logit 0) or dimension-permuted (logit 1)."""

    def __init__(self, latent_dim, hidden=256, layers=3):
        super().__init__()
        mods, width = [], latent_dim
        for _ in range(layers):
            mods += [nn.Linear(width, hidden), nn.LeakyReLU(0.2)]
            width = hidden
        mods.append(nn.Linear(width, 2))
        self.net = nn.Sequential(*mods)

    def forward(self, z):
        return self.net(z)


def permute_dims(z, seed=0):
    """Shuffle each latent column independently across the batch."""
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    b = z.shape[0]
    cols = [z[torch.randperm(b, generator=gen), j] for j in range(z.shape[1])]
    return torch.stack(cols, dim=1)


def total_correlation(discriminator, z):
    """Density-ratio estimate ``E[log D(z) / (1 - D(z))]`` from the two logits."""
    logits = discriminator(z)
    return (logits[:, 0] - logits[:, 1]).mean()


def discriminator_loss(discriminator, z, z_perm):
    zeros = torch.zeros(len(z), dtype=torch.long)
    ones = torch.ones(len(z_perm), dtype=torch.long)
    return 0.5 * (F.cross_entropy(discriminator(z), zeros)
                  + F.cross_entropy(discriminator(z_perm), ones))


class FactorVaeTerms(NamedTuple):
    recon: torch.Tensor
    kl: torch.Tensor
    tc: torch.Tensor
    total: torch.Tensor
    dist: LatentDistribution
    z: torch.Tensor
    noise: torch.Tensor
    taps: dict


def factorvae_objective(model: ConvVAE, x, discriminator, gamma, beta=1.0, noise=None,
                        seed=0, reduction="sum") -> FactorVaeTerms:
    """Reconstruction + beta KL + gamma times the discriminator TC estimate."""
    if len(x) < 2:
        raise ValueError("FactorVAE needs a batch of at least two samples")
    mu, logvar, taps = model.encode(x)
    if noise is None:
        noise = torch.randn(mu.shape, generator=torch.Generator().manual_seed(int(seed)),
                            dtype=mu.dtype)
    z = mu + torch.exp(0.5 * logvar) * noise
    dist = LatentDistribution(mu, logvar)
    loss = vae_loss(x, model.decode(z), dist, beta, reduction)
    tc = total_correlation(discriminator, z) if gamma else torch.zeros((), dtype=mu.dtype)
    total = loss.total + gamma * tc if gamma else loss.total
    return FactorVaeTerms(loss.recon, loss.kl, tc, total, dist, z, noise, taps)


def ad_factorvae_loss(model: ConvVAE, x, discriminator, cfg: AdConfig, gamma, beta=1.0,
                      noise=None, seed=0, reduction="sum"):
    """FactorVAE objective plus ``lambda`` times the attention overlap.

    Returns ``(total, components)``. With ``lambda == 0`` the overlap is not
    computed and ``total`` is exactly the FactorVAE objective.
    """
    terms = factorvae_objective(model, x, discriminator, gamma, beta, noise, seed, reduction)
    comps = {"recon": terms.recon, "kl": terms.kl, "tc": terms.tc, "terms": terms}
    if cfg.ad_lambda == 0:
        comps["ad"] = torch.zeros((), dtype=terms.total.dtype)
        return terms.total, comps
    layer = cfg.layer or model.config.tap_layers[-1]
    if layer not in terms.taps:
        raise UnsupportedConfigurationError(f"layer {layer!r} is not a configured tap")
    A = terms.taps[layer]
    if not A.requires_grad:
        raise UnsupportedConfigurationError(
            f"tap {layer!r} is detached from the encoder parameters; L_AD cannot train them")
    targets = terms.z if cfg.sampling == "z" else terms.dist.mu
    d = targets.shape[1]
    if d < 2:
        raise ValueError("attention disentanglement needs at least two latent dimensions")
    maps = torch.stack([gradient_attention(targets[:, i].sum(), A, create_graph=True)
                        for i in range(d)], dim=1)
    if not maps.requires_grad:
        raise UnsupportedConfigurationError(
            "attention maps carry no second-order graph; L_AD cannot train the encoder")
    ad = pair_overlap(_normalize_maps(maps, cfg.normalization), targets, cfg.pair_selection)
    comps["ad"] = ad
    return terms.total + cfg.ad_lambda * ad, comps


# ---------------------------------------------------------------------------
# Disentanglement metric

@dataclass
class DisentanglementReport:
    score: float
    votes: np.ndarray
    train_votes: np.ndarray
    classifier: np.ndarray
    active: np.ndarray
    recon_error: float | None = None

    def as_dict(self):
        return {"score": self.score, "recon_error": self.recon_error,
                "votes": self.votes.tolist(), "train_votes": self.train_votes.tolist(),
                "classifier": self.classifier.tolist(), "active": self.active.tolist()}


def _representation(model_or_fn, batch_size=256):
    """``f(images, factors) -> codes``; models contribute their posterior mean."""
    if callable(model_or_fn) and not isinstance(model_or_fn, (nn.Module, Checkpoint)):
        return model_or_fn, None
    model = as_model(model_or_fn)
    dtype = next(model.parameters()).dtype

    @torch.no_grad()
    def encode(images, factors=None):
        x = to_tensor(images, dtype)
        return torch.cat([model.encode(x[s:s + batch_size])[0]
                          for s in range(0, len(x), batch_size)]).double().numpy()
    return encode, model


@torch.no_grad()
def reconstruction_error(model, images, batch_size=256):
    """Mean over images of the per-image sum of squared pixel errors (decoding ``mu``)."""
    model = as_model(model)
    x = to_tensor(images, next(model.parameters()).dtype)
    total = 0.0
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size]
        mu, _, _ = model.encode(xb)
        total += float((model.decode(mu) - xb).pow(2).sum())
    return total / len(x)


def _vote_batch(dataset, encode, n, batch_per_vote, std, active, rng, chunk=8):
    votes = np.zeros((dataset.n_factors, len(std)), dtype=np.int64)
    idx_active = np.flatnonzero(active)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        ks = rng.integers(dataset.n_factors, size=m)
        imgs, facs = zip(*(dataset.sample_fixed(batch_per_vote, k, rng) for k in ks))
        codes = encode(np.concatenate(imgs), np.concatenate(facs))
        codes = codes.reshape(m, batch_per_vote, -1)
        for k, c in zip(ks, codes):
            local = (c[:, active] / std[active]).var(axis=0)
            votes[k, idx_active[np.argmin(local)]] += 1
        done += m
    return votes


def disentanglement_metric(model, dataset: FactorDataset, n_votes=500, batch_per_vote=64,
                           seed=0, *, n_global=10000, n_eval_votes=None, min_std=1e-8,
                           recon_sample=1000) -> DisentanglementReport:
    """Majority-vote accuracy of predicting the fixed factor from the latent
    dimension of least normalised variance.

    A classifier (factor per latent dimension) is fitted on ``n_votes`` votes
    and scored on ``n_eval_votes`` fresh votes. Latent scales come from a
    random subset of ``n_global`` images. ``model`` may also be a callable
    ``f(images, factors) -> codes``.
    """
    rng = np.random.default_rng(seed)
    encode, vae = _representation(model)
    ordinals = dataset.random_ordinals(min(n_global, len(dataset)), rng)
    imgs = dataset.images(ordinals)
    codes = encode(imgs, dataset.factors(ordinals))
    std = codes.std(axis=0)
    active = std > min_std
    recon = None
    if vae is not None:
        recon = reconstruction_error(vae, imgs[:recon_sample])
    n_factors, d = dataset.n_factors, codes.shape[1]
    if not active.any():
        empty = np.zeros((n_factors, d), dtype=np.int64)
        return DisentanglementReport(0.0, empty, empty, np.zeros(d, np.int64), active, recon)
    train_votes = _vote_batch(dataset, encode, n_votes, batch_per_vote, std, active, rng)
    eval_votes = _vote_batch(dataset, encode, n_eval_votes or n_votes, batch_per_vote, std,
                             active, rng)
    classifier = np.argmax(train_votes, axis=0)
    correct = eval_votes[classifier, np.arange(d)].sum()
    score = float(correct / eval_votes.sum())
    return DisentanglementReport(score, eval_votes, train_votes, classifier, active, recon)


# ---------------------------------------------------------------------------
# Training

def mean_pairwise_overlap(model, images, layer=None, sampling="mu", seed=0, batch_size=64):
    """Mean L_AD over all latent pairs of each image, averaged over images."""
    model = as_model(model)
    layer = layer or model.config.tap_layers[-1]
    x = to_tensor(check_images(images, image_shape=model.config.input_shape),
                  next(model.parameters()).dtype)
    vals = []
    for s in range(0, len(x), batch_size):
        maps, _, targets = latent_attention(model, x[s:s + batch_size], layer,
                                            sampling=sampling, seed=seed)
        vals.append(float(pair_overlap(maps.detach(), targets, "all")) * len(maps))
    return sum(vals) / len(x)


@dataclass
class DiscriminatorConfig:
    hidden: int = 256
    layers: int = 3
    learning_rate: float = 1e-4
    betas: tuple = (0.5, 0.9)


def train_ad_factorvae(images, config: VaeConfig, ad: AdConfig | None = None, gamma=10.0,
                       train: TrainConfig | None = None, seed=0, *,
                       factor_dataset: FactorDataset | None = None, eval_every=None,
                       eval_images=None, metric_kwargs=None,
                       disc: DiscriminatorConfig | None = None, callback=None):
    """Alternate VAE and discriminator updates; returns ``(checkpoint, trace)``.

    Each trace row is logged at an evaluation step and holds the training
    losses of that step plus (when data is available) the reconstruction
    error, disentanglement metric and mean pairwise eval-time overlap.
    """
    ad = ad or AdConfig()
    train = train or TrainConfig()
    disc = disc or DiscriminatorConfig()
    metric_kwargs = dict(metric_kwargs or {})
    X = check_images(images, image_shape=config.input_shape)
    n = len(X)
    n_steps = train.n_steps or train.epochs * math.ceil(n / train.batch_size)
    eval_every = eval_every or n_steps
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    model = build_model(config, seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        discriminator = TcDiscriminator(config.latent_dim, disc.hidden, disc.layers)
    opt = torch.optim.Adam(model.parameters(), lr=train.learning_rate)
    opt_d = torch.optim.Adam(discriminator.parameters(), lr=disc.learning_rate, betas=disc.betas)

    trace = []
    step = 0
    for _, idx in batch_schedule(n, train.batch_size, n_steps, rng):
        if len(idx) < 2:
            continue
        x = to_tensor(X[idx])
        noise = torch.randn(len(x), config.latent_dim, generator=gen)
        total, comps = ad_factorvae_loss(model, x, discriminator, ad, gamma, train.beta, noise,
                                         reduction=train.recon_reduction)
        if not torch.isfinite(total):
            raise DivergenceError(f"non-finite loss at step {step}",
                                  _ad_checkpoint(model, discriminator, seed, ad, gamma,
                                                 train, trace))
        opt.zero_grad()
        total.backward()
        opt.step()
        if gamma:
            z = comps["terms"].z.detach()
            opt_d.zero_grad()
            discriminator_loss(discriminator, z, permute_dims(z, gen)).backward()
            opt_d.step()
        step += 1
        if step % eval_every == 0 or step == n_steps:
            row = {"step": step, "total": float(total.detach())}
            row.update({name: float(torch.as_tensor(comps[key]).detach()) for name, key in
                        (("L_r", "recon"), ("L_KL", "kl"), ("TC", "tc"), ("L_AD", "ad"))})
            if eval_images is not None:
                row["recon_error"] = reconstruction_error(model, eval_images)
                row["eval_L_AD"] = mean_pairwise_overlap(model, eval_images, ad.layer)
            if factor_dataset is not None:
                report = disentanglement_metric(model, factor_dataset, **metric_kwargs)
                row["metric"] = report.score
                row.setdefault("recon_error", report.recon_error)
            trace.append(row)
            if callback is not None:
                callback(row)
    ckpt = _ad_checkpoint(model, discriminator, seed, ad, gamma, train, trace)
    return ckpt, trace


def _ad_checkpoint(model, discriminator, seed, ad, gamma, train, trace):
    meta = {"kind": "ad-factorvae", "seed": int(seed), "gamma": float(gamma),
            "ad": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(ad).items()},
            "train": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in asdict(train).items()},
            "trace": trace}
    extras = {f"discriminator.{k}": v.detach().numpy().copy()
              for k, v in discriminator.state_dict().items()}
    return Checkpoint.from_model(model.eval(), meta, extras)
