"""Conditional variational autoencoder used as the steerable generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import ndcore as nd
from ._validation import batches, check_images, check_labels, check_unit_interval, glorot, one_hot
from .exceptions import DimensionError, TrainingDivergedError, ValidationError
from .formats import read_json, read_tensor_file, write_json, write_tensor_file

logger = logging.getLogger(__name__)

_BCE_EPS = 1e-7


@dataclass
class ElboReport:
    reconstruction: float
    kl: float
    total: float
    batch_size: int

    @property
    def per_item(self) -> float:
        return self.total / max(self.batch_size, 1)


def elbo_loss(x, x_hat, mean, logvar, beta: float = 1.0) -> ElboReport:
    """Negative ELBO with a Bernoulli likelihood, summed over the batch."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise DimensionError(f"x {x.shape} and reconstruction {x_hat.shape} differ")
    if beta < 0:
        raise ValidationError("beta must be non-negative")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValidationError("x must lie in [0, 1]")
    p = np.clip(x_hat, _BCE_EPS, 1 - _BCE_EPS)
    recon = float(-(x * np.log(p) + (1 - x) * np.log1p(-p)).sum())
    mean = np.asarray(mean, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    kl = float(0.5 * (np.exp(logvar) + mean**2 - 1.0 - logvar).sum())
    n = x.shape[0] if x.ndim > 1 else 1
    return ElboReport(recon, kl, recon + beta * kl, n)


def reparameterize(mean, logvar, noise):
    """``mean + exp(logvar / 2) * noise``; works on arrays and tensors."""
    if isinstance(mean, nd.Tensor) or isinstance(logvar, nd.Tensor):
        return nd.add(mean, nd.mul(nd.exp(nd.mul(logvar, 0.5)), noise))
    mean, logvar, noise = (np.asarray(a) for a in (mean, logvar, noise))
    if not (mean.shape == logvar.shape == noise.shape):
        raise DimensionError(f"shapes differ: {mean.shape}, {logvar.shape}, {noise.shape}")
    return mean + np.exp(logvar / 2) * noise


def sample_truncated_gaussian(dim: int, t: float, n: int, seed) -> np.ndarray:
    """Standard normal draws with each coordinate resampled until ``|v| <= t``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return truncated_normal(rng, (n, dim), t)


def truncated_normal(rng: np.random.Generator, shape, t: float) -> np.ndarray:
    if not t > 0:
        raise ValidationError(f"truncation must be positive, got {t}")
    out = rng.standard_normal(shape)
    bad = np.abs(out) > t
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > t
    return out.astype(np.float32)


class CVAE(BaseEstimator, TransformerMixin):
    """MLP conditional VAE with label one-hots fed to encoder and decoder.

    ``transform`` returns posterior means, ``decode`` maps latents back to
    pixel probabilities.
    """

    def __init__(
        self,
        latent_dim=16,
        hidden_units=400,
        n_classes=10,
        beta=1.0,
        epochs=20,
        batch_size=128,
        learning_rate=1e-3,
        random_state=0,
    ):
        self.latent_dim = latent_dim
        self.hidden_units = hidden_units
        self.n_classes = n_classes
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    # -- parameters ---------------------------------------------------------

    def _init_params(self, n_features: int, rng: np.random.Generator) -> dict:
        h, k, c = self.hidden_units, self.latent_dim, self.n_classes
        return {
            "enc_W": glorot(rng, n_features + c, h),
            "enc_b": np.zeros(h, np.float32),
            "mu_W": glorot(rng, h, k),
            "mu_b": np.zeros(k, np.float32),
            "logvar_W": glorot(rng, h, k),
            "logvar_b": np.zeros(k, np.float32),
            "dec_W": glorot(rng, k + c, h),
            "dec_b": np.zeros(h, np.float32),
            "out_W": glorot(rng, h, n_features),
            "out_b": np.zeros(n_features, np.float32),
        }

    @staticmethod
    def _encode(p, x, y1h):
        hidden = nd.relu(nd.affine(nd.concat([x, y1h], axis=1), p["enc_W"], p["enc_b"]))
        return nd.affine(hidden, p["mu_W"], p["mu_b"]), nd.affine(hidden, p["logvar_W"], p["logvar_b"])

    @staticmethod
    def _decode_logits(p, h, y1h):
        hidden = nd.relu(nd.affine(nd.concat([h, y1h], axis=1), p["dec_W"], p["dec_b"]))
        return nd.affine(hidden, p["out_W"], p["out_b"])

    def negative_elbo(self, p, x, y1h, noise):
        """Per-item negative ELBO as a tape-aware scalar."""
        mean, logvar = self._encode(p, x, y1h)
        h = reparameterize(mean, logvar, noise)
        logits = self._decode_logits(p, h, y1h)
        total = nd.add(
            nd.sigmoid_binary_cross_entropy(logits, x.data if isinstance(x, nd.Tensor) else x),
            nd.mul(nd.gaussian_kl(mean, logvar), float(self.beta)),
        )
        return nd.mul(total, 1.0 / x.shape[0])

    # -- estimator API --------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        check_unit_interval(X)
        if X.shape[0] == 0:
            raise ValidationError("cannot fit a CVAE on an empty dataset")
        y = check_labels(y, X.shape[0], self.n_classes)
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("invalid training configuration")
        rng = np.random.default_rng(self.random_state)
        self.n_features_in_ = X.shape[1]
        self.params_ = self._init_params(X.shape[1], rng)
        opt = nd.Adam(learning_rate=self.learning_rate)
        y1h = one_hot(y, self.n_classes)
        self.history_ = []
        val = None
        if X_val is not None:
            Xv = check_images(X_val, X.shape[1], name="X_val")
            val = (Xv, check_labels(y_val, Xv.shape[0], self.n_classes, name="y_val"))
        for epoch in range(1, self.epochs + 1):
            total, count = 0.0, 0
            for b, idx in enumerate(batches(rng, X.shape[0], self.batch_size)):
                noise = rng.standard_normal((len(idx), self.latent_dim)).astype(np.float32)
                with nd.Tape() as tape:
                    leaves = {k: nd.Tensor(v, requires_grad=True) for k, v in self.params_.items()}
                    loss = self.negative_elbo(leaves, X[idx], y1h[idx], noise)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDivergedError(epoch, b, value)
                grads = tape.backward(loss)
                opt.step(self.params_, {k: grads[t] for k, t in leaves.items()})
                total += value * len(idx)
                count += len(idx)
            record = {"epoch": epoch, "train_neg_elbo": total / count}
            if val is not None:
                record["val_neg_elbo"] = self.score_elbo(*val, seed=0).per_item
            logger.info("cvae epoch %d: %s", epoch, record)
            self.history_.append(record)
        return self

    def encode(self, X, y):
        check_is_fitted(self, "params_")
        X = check_images(X, self.n_features_in_)
        y = check_labels(y, X.shape[0], self.n_classes)
        mean, logvar = self._encode(self.params_, X, one_hot(y, self.n_classes))
        return mean.data, logvar.data

    def transform(self, X, y):
        return self.encode(X, y)[0]

    def decode(self, h, y) -> np.ndarray:
        """Pixel probabilities in (0, 1), shape ``[n, n_features_in_]``."""
        check_is_fitted(self, "params_")
        h = np.asarray(h, dtype=np.float32)
        if h.ndim != 2 or h.shape[1] != self.latent_dim:
            raise DimensionError(f"latents must be [n, {self.latent_dim}], got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValidationError("latents must be finite")
        y = check_labels(y, h.shape[0], self.n_classes)
        logits = self._decode_logits(self.params_, h, one_hot(y, self.n_classes))
        # float32 sigmoid saturates to exactly 0/1 beyond |logit| ~ 17
        return np.clip(nd._stable_sigmoid(logits.data), _BCE_EPS, 1 - _BCE_EPS)

    def reconstruct(self, X, y) -> np.ndarray:
        return self.decode(self.transform(X, y), y)

    def score_elbo(self, X, y, seed=0, batch_size=1000) -> ElboReport:
        """Negative ELBO over a dataset with a single posterior sample per item."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.n_features_in_)
        y = check_labels(y, X.shape[0], self.n_classes)
        rng = np.random.default_rng(seed)
        recon = kl = 0.0
        for start in range(0, X.shape[0], batch_size):
            xb, yb = X[start:start + batch_size], y[start:start + batch_size]
            mean, logvar = self.encode(xb, yb)
            noise = rng.standard_normal(mean.shape).astype(np.float32)
            x_hat = self.decode(reparameterize(mean, logvar, noise), yb)
            rep = elbo_loss(xb, x_hat, mean, logvar, self.beta)
            recon += rep.reconstruction
            kl += rep.kl
        return ElboReport(recon, kl, recon + self.beta * kl, X.shape[0])

    # -- persistence ------------------------------------------------------------

    def save(self, directory, **extra) -> None:
        check_is_fitted(self, "params_")
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, value in self.params_.items():
            write_tensor_file(d / f"{name}.gint", value)
        write_json(
            d / "meta.json",
            {
                "params": self.get_params(),
                "n_features_in": self.n_features_in_,
                "layers": {k: list(v.shape) for k, v in self.params_.items()},
                "history": self.history_,
                **extra,
            },
        )

    @classmethod
    def load(cls, directory) -> CVAE:
        d = Path(directory)
        meta = read_json(d / "meta.json")
        model = cls(**meta["params"])
        model.n_features_in_ = meta["n_features_in"]
        model.params_ = {k: read_tensor_file(d / f"{k}.gint") for k in meta["layers"]}
        model.history_ = meta.get("history", [])
        return model


def cvae_encode(cvae: CVAE, x, y):
    return cvae.encode(x, y)


def cvae_decode(cvae: CVAE, h, y):
    return cvae.decode(h, y)


def train_cvae(train, config: dict | None = None, validation=None) -> CVAE:
    """Fit a :class:`CVAE` on a :class:`~genint.datagen.LabeledImageSet`."""
    model = CVAE(**(config or {}))
    if validation is None:
        return model.fit(train.images, train.labels)
    return model.fit(train.images, train.labels, validation.images, validation.labels)
