"""scikit-learn style wrappers around the VAE, attention and AD-FactorVAE code."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attention import (anomaly_attention, attention_set, fit_normal_stats, NormalStats)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .disentangle import (AdConfig, DiscriminatorConfig, disentanglement_metric,
                          mean_pairwise_overlap, train_ad_factorvae)
from .metrics import recon_diff_map, reconstruct
from .model import TrainConfig, VaeConfig, _as_input, train_vae
from .validation import check_images


class AttentionVAE(BaseEstimator, TransformerMixin):
    """One-class convolutional VAE with gradient attention readouts.

    ``transform`` returns posterior means; ``anomaly_maps`` returns
    input-resolution anomaly attention maps.
    """

    def __init__(self, latent_dim=32, channels=(32, 64, 128), activation="relu",
                 residual_blocks=0, hidden=0, epochs=10, n_steps=None, batch_size=32,
                 learning_rate=1e-4, beta=1.0, augment=False, layer=None, mode="sum-mu",
                 random_state=0):
        self.latent_dim = latent_dim
        self.channels = channels
        self.activation = activation
        self.residual_blocks = residual_blocks
        self.hidden = hidden
        self.epochs = epochs
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta = beta
        self.augment = augment
        self.layer = layer
        self.mode = mode
        self.random_state = random_state

    def _vae_config(self, input_shape):
        return VaeConfig.small(tuple(input_shape), self.latent_dim, tuple(self.channels),
                               activation=self.activation,
                               residual_blocks=self.residual_blocks, hidden=self.hidden)

    def _train_config(self):
        return TrainConfig(epochs=self.epochs, n_steps=self.n_steps, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, beta=self.beta,
                           augment=self.augment)

    def fit(self, X, y=None):
        """Train on normal images ``(N, H, W[, C])``; ``y`` is ignored."""
        X = check_images(X)
        config = self._vae_config(X.shape[1:])
        self._set_checkpoint(train_vae(X, config, self._train_config(), seed=self.random_state))
        if self.mode == "normal-diff":
            self.fit_normal_stats(X)
        return self

    def _set_checkpoint(self, ckpt: Checkpoint):
        self.checkpoint_ = ckpt
        self.model_ = ckpt.to_model()
        self.config_ = ckpt.config
        self.loss_curve_ = list(ckpt.meta.get("loss_curve", []))
        self.n_features_in_ = int(np.prod(ckpt.config.input_shape))

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        return check_images(X, image_shape=self.config_.input_shape, allow_single=True)

    def fit_normal_stats(self, X):
        check_is_fitted(self, "model_")
        self.normal_stats_ = fit_normal_stats(self.model_, self._check_X(X))
        return self

    @torch.no_grad()
    def transform(self, X):
        X = self._check_X(X)
        mu, _, _ = self.model_.encode(_as_input(self.model_, X))
        return mu.numpy()

    @torch.no_grad()
    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        z = torch.as_tensor(np.asarray(Z), dtype=next(self.model_.parameters()).dtype)
        if z.dim() != 2 or z.shape[1] != self.config_.latent_dim:
            raise ValueError(f"Z must have shape (N, {self.config_.latent_dim}), "
                             f"got {tuple(z.shape)}")
        return np.moveaxis(self.model_.decode(z).numpy(), 1, -1)

    def reconstruct(self, X):
        return reconstruct(self.model_, self._check_X(X))

    def score_samples(self, X):
        """Per-image anomaly score: the sum of the posterior mean."""
        return self.transform(X).sum(axis=1)

    def recon_maps(self, X):
        X = self._check_X(X)
        return recon_diff_map(X, reconstruct(self.model_, X))

    def attention_maps(self, X, sampling="mu", seed=None):
        """Per-dimension maps as an array ``(N, D, h, w)`` at the tap resolution."""
        X = self._check_X(X)
        maps = attention_set(self.model_, X, self.layer, sampling,
                             self.random_state if seed is None else seed)
        return np.stack([m.values for m in maps], axis=1)

    def anomaly_maps(self, X, mode=None, seed=None):
        X = self._check_X(X)
        mode = mode or self.mode
        stats = getattr(self, "normal_stats_", None)
        if mode == "normal-diff" and stats is None:
            raise ValueError("call fit_normal_stats before requesting normal-diff maps")
        out = anomaly_attention(self.model_, X, mode, self.layer, stats,
                                self.random_state if seed is None else seed)
        return out.values.reshape(len(X), *X.shape[1:3])

    def save(self, path):
        check_is_fitted(self, "model_")
        ckpt = self.checkpoint_
        meta = dict(ckpt.meta, estimator=self.get_params())
        extras = dict(ckpt.extras)
        stats = getattr(self, "normal_stats_", None)
        if stats is not None:
            extras.update(normal_mu=np.asarray(stats.mu, dtype=np.float64),
                          normal_sigma=np.asarray(stats.sigma, dtype=np.float64))
        return save_checkpoint(Checkpoint(ckpt.config, ckpt.parameters, meta, extras), path)

    @classmethod
    def load(cls, path):
        ckpt = load_checkpoint(path)
        params = dict(ckpt.meta.get("estimator", {}))
        if "channels" in params:
            params["channels"] = tuple(params["channels"])
        est = cls(**params)
        est._set_checkpoint(ckpt)
        if "normal_mu" in ckpt.extras:
            est.normal_stats_ = NormalStats(ckpt.extras["normal_mu"], ckpt.extras["normal_sigma"])
        return est


class ADFactorVAE(AttentionVAE):
    """FactorVAE with the attention disentanglement penalty.

    ``ad_lambda=0`` gives the plain FactorVAE baseline. ``score`` is the
    majority-vote disentanglement metric on a ``FactorDataset``.
    """

    def __init__(self, latent_dim=10, channels=(32, 32, 64, 64), activation="relu",
                 residual_blocks=0, hidden=128, epochs=10, n_steps=None, batch_size=64,
                 learning_rate=1e-4, beta=1.0, augment=False, layer=None, mode="sum-mu",
                 random_state=0, gamma=40.0, ad_lambda=1.0, pair_selection="top2",
                 ad_normalization="none", ad_sampling="z", recon_reduction="bernoulli"):
        super().__init__(latent_dim=latent_dim, channels=channels, activation=activation,
                         residual_blocks=residual_blocks, hidden=hidden, epochs=epochs,
                         n_steps=n_steps, batch_size=batch_size, learning_rate=learning_rate,
                         beta=beta, augment=augment, layer=layer, mode=mode,
                         random_state=random_state)
        self.gamma = gamma
        self.ad_lambda = ad_lambda
        self.pair_selection = pair_selection
        self.ad_normalization = ad_normalization
        self.ad_sampling = ad_sampling
        self.recon_reduction = recon_reduction

    def _ad_config(self):
        return AdConfig(ad_lambda=self.ad_lambda, pair_selection=self.pair_selection,
                        layer=self.layer, normalization=self.ad_normalization,
                        sampling=self.ad_sampling)

    def fit(self, X, y=None, *, factor_dataset=None, eval_images=None, eval_every=None,
            metric_kwargs=None, callback=None):
        X = check_images(X)
        train = self._train_config()
        train.recon_reduction = self.recon_reduction
        ckpt, trace = train_ad_factorvae(
            X, self._vae_config(X.shape[1:]), self._ad_config(), self.gamma, train,
            seed=self.random_state, factor_dataset=factor_dataset, eval_every=eval_every,
            eval_images=eval_images, metric_kwargs=metric_kwargs,
            disc=DiscriminatorConfig(), callback=callback)
        self._set_checkpoint(ckpt)
        self.trace_ = trace
        return self

    def pairwise_overlap(self, X):
        """Mean eval-time L_AD over all latent pairs."""
        check_is_fitted(self, "model_")
        return mean_pairwise_overlap(self.model_, self._check_X(X), self._ad_config().layer)

    def score(self, dataset, y=None, **metric_kwargs):
        check_is_fitted(self, "model_")
        metric_kwargs.setdefault("seed", self.random_state)
        report = disentanglement_metric(self.model_, dataset, **metric_kwargs)
        self.last_report_ = report
        return report.score
