"""Convolutional VAEs: configuration, encoder taps, reparameterization,
the reconstruction + KL objective and the one-class training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import augment_pixels
from .exceptions import ConfigError, DivergenceError
from .validation import check_images, to_tensor

ACTIVATIONS = {
    "relu": nn.ReLU,
    "leaky_relu": lambda: nn.LeakyReLU(0.1),
    "elu": nn.ELU,
    "softplus": nn.Softplus,
    "tanh": nn.Tanh,
}


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 4
    stride: int = 2
    padding: int = 1


def _conv_out(size, spec):
    return (size + 2 * spec.padding - spec.kernel) // spec.stride + 1


@dataclass(frozen=True)
class VaeConfig:
    """Architecture of a ``ConvVAE``.

    The decoder mirrors ``convs`` with transposed convolutions whose output
    sizes are pinned to the encoder's, so reconstructions always match the
    input resolution. Taps are named ``conv1``, ``conv2``, ... after the
    stage that produces them.
    """

    latent_dim: int = 32
    input_shape: tuple[int, int, int] = (64, 64, 1)
    convs: tuple[ConvSpec, ...] = (ConvSpec(32), ConvSpec(64), ConvSpec(128))
    activation: str = "relu"
    residual_blocks: int = 0
    hidden: int = 0
    tap_layers: tuple[str, ...] | None = None
    family: str = "small"

    def __post_init__(self):
        convs = tuple(c if isinstance(c, ConvSpec) else ConvSpec(**c) for c in self.convs)
        object.__setattr__(self, "convs", convs)
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.tap_layers is None:
            object.__setattr__(self, "tap_layers", self.layer_names)
        else:
            object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if not convs:
            raise ConfigError("need at least one conv layer")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not self.tap_layers:
            raise ConfigError("need at least one tap layer")
        unknown = set(self.tap_layers) - set(self.layer_names)
        if unknown:
            raise ConfigError(f"unknown tap layers {sorted(unknown)}; have {self.layer_names}")
        if min(min(s[:2]) for s in self.stage_shapes) < 1:
            raise ConfigError(f"input {self.input_shape} too small for {len(convs)} convs")

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(f"conv{i + 1}" for i in range(len(self.convs)))

    @property
    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """``(h, w, channels)`` after each encoder stage."""
        h, w, _ = self.input_shape
        shapes = []
        for spec in self.convs:
            h, w = _conv_out(h, spec), _conv_out(w, spec)
            shapes.append((h, w, spec.out_channels))
        return shapes

    @property
    def default_layer(self) -> str:
        """Middle conv tap, falling back to the nearest configured tap."""
        names = self.layer_names
        mid = names[len(names) // 2] if len(names) > 1 else names[0]
        if mid in self.tap_layers:
            return mid
        return self.tap_layers[len(self.tap_layers) // 2]

    @property
    def decoder_spec(self) -> list[dict]:
        chans = [self.input_shape[2]] + [c.out_channels for c in self.convs]
        sizes = [self.input_shape[:2]] + [s[:2] for s in self.stage_shapes]
        return [dict(in_channels=chans[i + 1], out_channels=chans[i], kernel=self.convs[i].kernel,
                     stride=self.convs[i].stride, padding=self.convs[i].padding,
                     output_size=tuple(sizes[i]))
                for i in reversed(range(len(self.convs)))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["convs"] = [asdict(c) for c in self.convs]
        d["input_shape"] = list(self.input_shape)
        d["tap_layers"] = list(self.tap_layers)
        return d

    @classmethod
    def from_dict(cls, d) -> "VaeConfig":
        d = dict(d)
        d["convs"] = tuple(ConvSpec(**c) for c in d["convs"])
        d["input_shape"] = tuple(d["input_shape"])
        d["tap_layers"] = tuple(d["tap_layers"]) if d.get("tap_layers") is not None else None
        return cls(**d)

    @classmethod
    def small(cls, input_shape=(64, 64, 1), latent_dim=32, channels=(32, 64, 128), **kw):
        """Three stride-2 convs: 100x100 input gives 50/25/12 taps."""
        return cls(latent_dim, tuple(input_shape), tuple(ConvSpec(c) for c in channels),
                   family="small", **kw)

    @classmethod
    def residual(cls, input_shape=(256, 256, 3), latent_dim=32,
                 channels=(32, 64, 128, 256), blocks=1, **kw):
        """Stride-2 stages each followed by ``blocks`` residual blocks."""
        kw.setdefault("hidden", 0)
        return cls(latent_dim, tuple(input_shape), tuple(ConvSpec(c) for c in channels),
                   residual_blocks=blocks, family="residual", **kw)

    @classmethod
    def tiny(cls, latent_dim=2, activation="elu"):
        """One conv with two channels on 8x8 inputs; small enough for finite differences."""
        return cls(latent_dim, (8, 8, 1), (ConvSpec(2, kernel=3, stride=1, padding=1),),
                   activation=activation, family="tiny")


class ResBlock(nn.Module):
    def __init__(self, channels, activation):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = ACTIVATIONS[activation]()

    def forward(self, x):
        return self.act(x + self.conv2(self.act(self.conv1(x))))


class EncoderStage(nn.Module):
    def __init__(self, in_channels, spec: ConvSpec, activation, blocks):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding)
        self.act = ACTIVATIONS[activation]()
        self.blocks = nn.Sequential(*(ResBlock(spec.out_channels, activation) for _ in range(blocks)))

    def forward(self, x):
        return self.blocks(self.act(self.conv(x)))


class DecoderStage(nn.Module):
    def __init__(self, spec: dict, activation, blocks, final):
        super().__init__()
        self.output_size = spec["output_size"]
        self.deconv = nn.ConvTranspose2d(spec["in_channels"], spec["out_channels"], spec["kernel"],
                                         spec["stride"], spec["padding"])
        self.act = nn.Sigmoid() if final else ACTIVATIONS[activation]()
        n = 0 if final else blocks
        self.blocks = nn.Sequential(*(ResBlock(spec["out_channels"], activation) for _ in range(n)))

    def forward(self, x):
        x = self.deconv(x, output_size=self.output_size)
        return self.blocks(self.act(x))


class ConvVAE(nn.Module):
    """Encoder stages -> linear posterior head; linear -> mirrored decoder.

    No normalisation layers, so samples in a batch never interact; summing a
    per-sample target over the batch yields exact per-sample gradients.
    """

    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        act = config.activation
        in_ch = config.input_shape[2]
        stages = []
        for spec in config.convs:
            stages.append(EncoderStage(in_ch, spec, act, config.residual_blocks))
            in_ch = spec.out_channels
        self.stages = nn.ModuleList(stages)
        h, w, c = config.stage_shapes[-1]
        self._feat_shape = (c, h, w)
        feat = c * h * w
        d = config.latent_dim
        if config.hidden:
            self.head = nn.Sequential(nn.Linear(feat, config.hidden), ACTIVATIONS[act](),
                                      nn.Linear(config.hidden, 2 * d))
            self.dec_fc = nn.Sequential(nn.Linear(d, config.hidden), ACTIVATIONS[act](),
                                        nn.Linear(config.hidden, feat), ACTIVATIONS[act]())
        else:
            self.head = nn.Linear(feat, 2 * d)
            self.dec_fc = nn.Sequential(nn.Linear(d, feat), ACTIVATIONS[act]())
        specs = config.decoder_spec
        self.dec_stages = nn.ModuleList(
            DecoderStage(s, act, config.residual_blocks, final=(i == len(specs) - 1))
            for i, s in enumerate(specs))

    def _head(self, feat):
        out = self.head(feat.flatten(1))
        mu, logvar = out.chunk(2, dim=1)
        return mu, logvar

    def encode(self, x):
        """Return ``(mu, logvar, taps)`` with taps keyed by configured layer name."""
        taps = {}
        for i, stage in enumerate(self.stages):
            x = stage(x)
            name = f"conv{i + 1}"
            if name in self.config.tap_layers:
                taps[name] = x
        mu, logvar = self._head(x)
        return mu, logvar, taps

    def encode_from(self, layer, activations):
        """Continue the encoder from a tap's activations."""
        start = self.config.layer_names.index(layer) + 1
        x = activations
        for stage in self.stages[start:]:
            x = stage(x)
        return self._head(x)

    def decode(self, z):
        x = self.dec_fc(z).view(-1, *self._feat_shape)
        for stage in self.dec_stages:
            x = stage(x)
        return x

    def forward(self, x, noise=None):
        mu, logvar, _ = self.encode(x)
        if noise is None:
            noise = torch.randn_like(mu)
        z = mu + torch.exp(0.5 * logvar) * noise
        return self.decode(z), mu, logvar, z


def build_model(config: VaeConfig, seed=0, dtype=torch.float32) -> ConvVAE:
    """Instantiate with parameters drawn from a private RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ConvVAE(config)
    return model.to(dtype)


# ---------------------------------------------------------------------------
# Distributions and codes

class LatentDistribution(NamedTuple):
    mu: torch.Tensor
    logvar: torch.Tensor

    @property
    def sigma(self):
        return torch.exp(0.5 * self.logvar)

    @property
    def var(self):
        return torch.exp(self.logvar)

    @property
    def dim(self):
        return self.mu.shape[-1]


class LatentCode(NamedTuple):
    z: torch.Tensor
    noise: torch.Tensor


def _as_input(model, images):
    if isinstance(images, torch.Tensor):
        x = images
        if x.dim() == 3:
            x = x[None]
        h, w, c = model.config.input_shape
        if tuple(x.shape[1:]) != (c, h, w):
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match config {(c, h, w)}")
        return x
    X = check_images(images, image_shape=model.config.input_shape, allow_single=True)
    return to_tensor(X, dtype=next(model.parameters()).dtype)


def encode(model: ConvVAE, images):
    """Posterior parameters and tap activations for ``images``.

    Tap tensors stay attached to the autograd graph so attention can
    differentiate latent quantities with respect to them.
    """
    x = _as_input(model, images)
    mu, logvar, taps = model.encode(x)
    return LatentDistribution(mu, logvar), taps


def make_generator(seed):
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def reparameterize(dist: LatentDistribution, seed=0, noise=None) -> LatentCode:
    """``z = mu + exp(logvar / 2) * eps``, with ``eps`` drawn from ``seed``."""
    if noise is None:
        noise = torch.randn(dist.mu.shape, generator=make_generator(seed), dtype=dist.mu.dtype)
    return LatentCode(dist.mu + dist.sigma * noise, noise)


def decode(model: ConvVAE, z):
    z = torch.as_tensor(z, dtype=next(model.parameters()).dtype)
    if z.dim() == 1:
        z = z[None]
    if z.shape[-1] != model.config.latent_dim:
        raise ValueError(f"latent code has {z.shape[-1]} dims, model expects {model.config.latent_dim}")
    return model.decode(z)


# ---------------------------------------------------------------------------
# Objective

class VaeLoss(NamedTuple):
    recon: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor


def kl_divergence(dist: LatentDistribution) -> torch.Tensor:
    """Closed-form KL(q(z|x) || N(0, I)) per sample, summed over dimensions."""
    mu, logvar = dist
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(-1)


def vae_loss(x, x_hat, dist: LatentDistribution, beta=1.0, reduction="mean") -> VaeLoss:
    """Squared error plus ``beta`` times the batch-mean KL.

    ``reduction="mean"`` averages the squared error over pixels and batch;
    ``"sum"`` sums over the pixels of each image and averages over the batch,
    which puts the KL weight on the usual per-image scale. ``"bernoulli"``
    is the per-image summed binary cross-entropy, for binary images.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if reduction == "mean":
        recon = F.mse_loss(x_hat, x, reduction="mean")
    elif reduction == "sum":
        recon = (x_hat - x).pow(2).flatten(1).sum(1).mean()
    elif reduction == "bernoulli":
        recon = F.binary_cross_entropy(x_hat, x, reduction="none").flatten(1).sum(1).mean()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    kl = kl_divergence(dist).mean()
    return VaeLoss(recon, kl, recon + beta * kl)


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainConfig:
    epochs: int = 10
    n_steps: int | None = None
    batch_size: int = 32
    learning_rate: float = 1e-4
    beta: float = 1.0
    recon_reduction: str = "mean"
    augment: bool = False
    rotations: tuple = (0, 90, 180, 270)
    mirror_prob: float = 0.5


def batch_schedule(n, batch_size, n_steps, rng):
    """Yield ``(epoch, indices)``; each epoch is a fresh permutation."""
    per_epoch = math.ceil(n / batch_size)
    step = 0
    epoch = 0
    while step < n_steps:
        perm = rng.permutation(n)
        for b in range(per_epoch):
            if step >= n_steps:
                return
            yield epoch, perm[b * batch_size:(b + 1) * batch_size]
            step += 1
        epoch += 1


def augment_batch(X, rng, cfg: TrainConfig):
    return np.stack([augment_pixels(x, rng, rotations=cfg.rotations, mirror_prob=cfg.mirror_prob)
                     for x in X])


def train_vae(images, config: VaeConfig, train: TrainConfig | None = None, seed=0,
              callback=None):
    """Fit a VAE on normal images only and return a ``Checkpoint``.

    ``meta['loss_curve']`` holds the mean total loss of each epoch.
    On a non-finite loss a ``DivergenceError`` carrying the parameters from
    the end of the last finite epoch is raised.
    """
    from .checkpoint import Checkpoint

    train = train or TrainConfig()
    X = check_images(images, image_shape=config.input_shape)
    n = len(X)
    n_steps = train.n_steps or train.epochs * math.ceil(n / train.batch_size)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    model = build_model(config, seed)
    opt = torch.optim.Adam(model.parameters(), lr=train.learning_rate)

    curve, epoch_losses, step_losses = [], [], []
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    good_steps = 0
    current = 0
    for epoch, idx in batch_schedule(n, train.batch_size, n_steps, rng):
        if epoch != current:
            curve.append(float(np.mean(epoch_losses)))
            epoch_losses = []
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            good_steps = len(step_losses)
            current = epoch
        xb = augment_batch(X[idx], rng, train) if train.augment else X[idx]
        x = to_tensor(xb)
        x_hat, mu, logvar, _ = model(x, noise=torch.randn(len(x), config.latent_dim, generator=gen))
        loss = vae_loss(x, x_hat, LatentDistribution(mu, logvar), train.beta,
                        train.recon_reduction)
        if not torch.isfinite(loss.total):
            model.load_state_dict(last_good)
            meta = _meta(seed, train, curve, step_losses[:good_steps])
            raise DivergenceError(f"non-finite loss at step {len(step_losses)}",
                                  Checkpoint.from_model(model, meta))
        opt.zero_grad()
        loss.total.backward()
        opt.step()
        value = float(loss.total.detach())
        epoch_losses.append(value)
        step_losses.append(value)
        if callback is not None:
            callback(len(step_losses), loss)
    if epoch_losses:
        curve.append(float(np.mean(epoch_losses)))
    return Checkpoint.from_model(model.eval(), _meta(seed, train, curve, step_losses))


def _meta(seed, train, curve, step_losses):
    return {
        "kind": "vae",
        "seed": int(seed),
        "epochs": len(curve),
        "steps": len(step_losses),
        "train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(train).items()},
        "loss_curve": curve,
        "initial_loss": step_losses[0] if step_losses else None,
        "final_loss": step_losses[-1] if step_losses else None,
    }
