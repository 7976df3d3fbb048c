"""Latent-space steering: principal directions, intervention draws, X_int and X_itr."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datagen import NUM_CLASSES, ColorPalette, LabeledImageSet, colorize, counter_uniform, sample_seed
from .exceptions import InsufficientDataError, ValidationError
from .formats import read_json, write_json
from .genmodel import CVAE, truncated_normal

OFFSET_MODES = ("none", "mean_projection")
SOURCES = ("prior", "encoded")


@dataclass
class LatentBasis:
    directions: np.ndarray  # rows r_j, ordered by explained variance
    sigmas: np.ndarray
    data_mean: np.ndarray

    @property
    def dim(self) -> int:
        return self.directions.shape[0]

    def checksum(self) -> str:
        h = hashlib.sha1()
        for arr in (self.directions, self.sigmas, self.data_mean):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def orthonormality_error(self) -> float:
        gram = self.directions @ self.directions.T
        return float(np.abs(gram - np.eye(self.dim)).max())

    def save(self, directory, **meta) -> None:
        # float64 survives as raw little-endian bytes; GINT only carries float32
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("directions", "sigmas", "data_mean"):
            (d / f"{name}.f8").write_bytes(np.ascontiguousarray(getattr(self, name), dtype="<f8").tobytes())
        write_json(d / "meta.json", {"dim": self.dim, "checksum": self.checksum(), **meta})

    @classmethod
    def load(cls, directory) -> LatentBasis:
        d = Path(directory)
        k = read_json(d / "meta.json")["dim"]
        raw = {name: np.frombuffer((d / f"{name}.f8").read_bytes(), dtype="<f8").copy()
               for name in ("directions", "sigmas", "data_mean")}
        return cls(raw["directions"].reshape(k, -1), raw["sigmas"], raw["data_mean"])


class LatentPCA(BaseEstimator, TransformerMixin):
    """Eigendecomposition of the latent sample covariance.

    ``transform`` returns coordinates along the principal directions, in
    units of the latent space (not whitened).
    """

    def fit(self, H, y=None):
        H = check_array(H, dtype=np.float64)
        if H.shape[0] < 2:
            raise InsufficientDataError("need at least two latents to fit a basis")
        mean = H.mean(axis=0)
        centered = H - mean
        cov = centered.T @ centered / (H.shape[0] - 1)
        eigvals, eigvecs = np.linalg.eigh(cov)
        order = np.argsort(eigvals)[::-1]
        eigvals = np.clip(eigvals[order], 0.0, None)
        directions = eigvecs[:, order].T
        # deterministic sign: largest-magnitude entry of each direction positive
        flip = np.sign(directions[np.arange(len(directions)), np.abs(directions).argmax(axis=1)])
        directions *= flip[:, None]
        self.basis_ = LatentBasis(directions, np.sqrt(eigvals), mean)
        self.n_features_in_ = H.shape[1]
        return self

    def transform(self, H):
        check_is_fitted(self, "basis_")
        H = check_array(H, dtype=np.float64)
        return (H - self.basis_.data_mean) @ self.basis_.directions.T


def fit_latent_basis(cvae: CVAE, dataset: LabeledImageSet | None = None, *, prior_samples=None, seed=0):
    """PCA of encoder posterior means over ``dataset`` (the aggregate posterior).

    With ``prior_samples=n`` the basis is fitted to ``n`` standard-normal
    draws instead.
    """
    if prior_samples is not None:
        H = np.random.default_rng(seed).standard_normal((prior_samples, cvae.latent_dim))
    else:
        if dataset is None or len(dataset) < 2:
            raise InsufficientDataError("need at least two images to fit a basis")
        H = cvae.transform(dataset.images, dataset.labels)
    return LatentPCA().fit(H).basis_


def apply_intervention(h, basis: LatentBasis, j: int, s_prime: float, offset_mode="none"):
    """Shift ``h`` along direction ``j`` (1-based) by ``sigma_j * s_prime``.

    ``mean_projection`` replaces the component of ``h - data_mean`` along
    ``r_j`` with ``sigma_j * s_prime`` instead of adding to it.
    """
    if not 1 <= j <= basis.dim:
        raise IndexError(f"direction {j} outside 1..{basis.dim}")
    if offset_mode not in OFFSET_MODES:
        raise ValidationError(f"offset_mode must be one of {OFFSET_MODES}")
    if not np.isfinite(s_prime):
        raise ValidationError("s_prime must be finite")
    h = np.asarray(h, dtype=np.float64)
    r = basis.directions[j - 1]
    step = basis.sigmas[j - 1] * s_prime
    if offset_mode == "mean_projection":
        step = step - (h - basis.data_mean) @ r
    if np.ndim(step):
        return h + step[..., None] * r
    return h + step * r


@dataclass(frozen=True)
class InterventionStrategy:
    truncation: float = 1.0
    top_k: int = 2
    scale: float = 3.0
    directions_per_sample: int = 2
    offset_mode: str = "none"

    def validate(self, latent_dim: int) -> InterventionStrategy:
        if not self.truncation > 0:
            raise ValidationError("truncation t must be > 0")
        if not 1 <= self.top_k <= latent_dim:
            raise ValidationError(f"top_k must lie in [1, {latent_dim}]")
        if self.scale < 0:
            raise ValidationError("scale s must be >= 0")
        if not 1 <= self.directions_per_sample:
            raise ValidationError("directions_per_sample must be >= 1")
        if self.directions_per_sample > self.top_k:
            raise ValidationError("directions_per_sample cannot exceed top_k")
        if self.offset_mode not in OFFSET_MODES:
            raise ValidationError(f"offset_mode must be one of {OFFSET_MODES}")
        return self

    def as_dict(self) -> dict:
        return asdict(self)


def _draw(strategy: InterventionStrategy, rng: np.random.Generator):
    dirs = rng.choice(strategy.top_k, size=strategy.directions_per_sample, replace=False) + 1
    s_prime = rng.uniform(-strategy.scale, strategy.scale, size=len(dirs))
    return dirs.astype(np.int64), s_prime


def sample_strategy_draw(strategy: InterventionStrategy, basis: LatentBasis, seed):
    """Direction indices (1-based, from the top-k) and step sizes in [-s, s].

    The draw never looks at the class label.
    """
    strategy.validate(basis.dim)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _draw(strategy, rng)


@dataclass
class InterventionRecord:
    h0: np.ndarray
    h0_star: np.ndarray
    label: int
    z: np.ndarray = field(repr=False)  # length top_k, 0 where untouched


def intervene_latent(h0, basis, strategy, dirs, s_prime):
    h = np.asarray(h0, dtype=np.float64)
    z = np.zeros(strategy.top_k)
    for j, s in zip(dirs, s_prime):
        h = apply_intervention(h, basis, int(j), float(s), strategy.offset_mode)
        z[j - 1] = s
    return h, z


def generate_interventional_set(
    cvae: CVAE,
    basis: LatentBasis,
    strategy: InterventionStrategy,
    per_class_n: int,
    seed: int,
    source: str = "prior",
    dataset: LabeledImageSet | None = None,
    *,
    batch_size: int = 512,
):
    """Decode ``per_class_n`` intervened latents for every class.

    Sample ``i`` uses its own generator ``mix(seed, i)`` for the source latent
    and the strategy draw, so any chunking of the work gives the same output.
    With ``source="encoded"`` the source latent is drawn from the encoder
    posterior of a ``dataset`` image of the same class (images cycled in
    order), using noise truncated at ``t``; otherwise from the prior
    truncated at ``t``.
    """
    strategy.validate(basis.dim)
    if per_class_n < 1:
        raise ValidationError("per_class_n must be positive")
    if source not in SOURCES:
        raise ValidationError(f"source must be one of {SOURCES}")
    n_classes = cvae.n_classes
    labels = np.repeat(np.arange(n_classes), per_class_n)
    n = labels.shape[0]
    if source == "encoded":
        if dataset is None or len(dataset) == 0:
            raise InsufficientDataError("encoded source needs a non-empty dataset")
        mean, logvar = cvae.encode(dataset.images, dataset.labels)
        std = np.exp(0.5 * logvar.astype(np.float64))
        pools = {c: np.flatnonzero(dataset.labels == c) for c in range(n_classes)}
        if any(len(p) == 0 for p in pools.values()):
            raise InsufficientDataError("every class needs at least one source image")
    h0 = np.empty((n, cvae.latent_dim))
    h_star = np.empty_like(h0)
    z = np.empty((n, strategy.top_k))
    for i in range(n):
        rng = sample_seed(seed, i)
        if source == "prior":
            h0[i] = truncated_normal(rng, (cvae.latent_dim,), strategy.truncation)
        else:
            pool = pools[int(labels[i])]
            j = pool[(i % per_class_n) % len(pool)]
            eps = truncated_normal(rng, (cvae.latent_dim,), strategy.truncation)
            h0[i] = mean[j] + std[j] * eps
        dirs, s_prime = _draw(strategy, rng)
        h_star[i], z[i] = intervene_latent(h0[i], basis, strategy, dirs, s_prime)
    h_star32 = h_star.astype(np.float32)
    images = np.concatenate(
        [cvae.decode(h_star32[a:a + batch_size], labels[a:a + batch_size]) for a in range(0, n, batch_size)]
    )
    side = int(round(np.sqrt(cvae.n_features_in_ / 3)))
    images = images.reshape(n, side, side, 3)
    records = [InterventionRecord(h0[i], h_star32[i], int(labels[i]), z[i]) for i in range(n)]
    out = LabeledImageSet(
        images,
        labels,
        z.astype(np.float32),
        None,
        {
            "kind": "interventional",
            "source": source,
            "seed": seed,
            "per_class_n": per_class_n,
            "basis_checksum": basis.checksum(),
            **strategy.as_dict(),
        },
    )
    return out, records


def transfer_intervention(gray_source: LabeledImageSet, palette: ColorPalette, seed: int) -> LabeledImageSet:
    """Re-render natural digits on backgrounds drawn independently of the label.

    Desk-scale stand-in for style transfer: the nuisance that the generative
    interventions randomise on this benchmark is the background, so every
    natural digit gets a uniformly drawn palette color.
    """
    if gray_source is None or len(gray_source) == 0:
        raise ValidationError("transfer needs the grayscale source images")
    if gray_source.images.shape[-1] != 1:
        raise ValidationError("transfer needs single-channel grayscale sources")
    k = palette.colors.shape[0]
    u = counter_uniform(seed, 17, np.arange(len(gray_source)))
    index = np.minimum((u * k).astype(np.int64), k - 1)
    images = colorize(gray_source.images, palette.colors[index])
    return LabeledImageSet(
        images,
        gray_source.labels.copy(),
        np.eye(k, dtype=np.float32)[index],
        palette.palette_id,
        {"kind": "transferred", "seed": seed},
    )


def class_balance(labels, n_classes=NUM_CLASSES) -> np.ndarray:
    return np.bincount(np.asarray(labels), minlength=n_classes)
