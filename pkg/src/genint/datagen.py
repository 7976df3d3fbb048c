"""Colored-MNIST synthesis and ground-truth structural causal models."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DimensionError, ValidationError
from .formats import (
    load_idx,
    read_json,
    read_tensor_file,
    write_idx_images,
    write_idx_labels,
    write_json,
    write_tensor_file,
)

NUM_CLASSES = 10
MODES = ("train_confounded", "test_confounded", "test_causal")

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


# -- counter-based randomness -----------------------------------------------


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream: int, index) -> np.ndarray:
    """Uniform [0, 1) values that depend only on ``(seed, stream, index)``.

    Element ``i`` never depends on how many other elements are drawn, so
    chunked or parallel generation reproduces sequential generation.
    """
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(np.uint64(stream)))
        bits = _splitmix64(idx ^ key)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 2**53)


def sample_seed(seed: int, index: int) -> np.random.Generator:
    """Per-sample generator ``mix(seed, index)``."""
    return np.random.default_rng([seed & 0xFFFFFFFF, index])


# -- datasets ----------------------------------------------------------------


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [n, H, W, C] in [0, 1]
    labels: np.ndarray  # [n] int
    nuisance: np.ndarray | None = None  # [n, d_z]
    palette_id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be [n, H, W, C], got {self.images.shape}")
        n = self.images.shape[0]
        if self.labels.shape != (n,):
            raise DimensionError(f"{n} images but labels of shape {self.labels.shape}")
        if self.nuisance is not None:
            self.nuisance = np.asarray(self.nuisance, dtype=np.float32)
            if self.nuisance.ndim != 2 or self.nuisance.shape[0] != n:
                raise DimensionError(f"nuisance must be [{n}, d], got {self.nuisance.shape}")
        if n and (self.images.min() < 0 or self.images.max() > 1):
            raise ValidationError("image values must lie in [0, 1]")
        if n and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValidationError(f"labels must lie in [0, {NUM_CLASSES})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, index) -> LabeledImageSet:
        return LabeledImageSet(
            self.images[index],
            self.labels[index],
            None if self.nuisance is None else self.nuisance[index],
            self.palette_id,
            dict(self.meta),
        )

    def save(self, directory, **meta) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor_file(d / "images.gint", self.images)
        write_tensor_file(d / "labels.gint", self.labels.astype(np.float32))
        if self.nuisance is not None:
            write_tensor_file(d / "nuisance.gint", self.nuisance)
        elif (d / "nuisance.gint").exists():
            (d / "nuisance.gint").unlink()
        info = dict(self.meta, **meta)
        info.update(palette=self.palette_id, count=len(self), shape=list(self.images.shape))
        write_json(d / "meta.json", info)

    @classmethod
    def load(cls, directory) -> LabeledImageSet:
        d = Path(directory)
        meta = read_json(d / "meta.json")
        nuisance = read_tensor_file(d / "nuisance.gint") if (d / "nuisance.gint").exists() else None
        labels = read_tensor_file(d / "labels.gint").astype(np.int64)
        return cls(read_tensor_file(d / "images.gint"), labels, nuisance, meta.get("palette"), meta)


@dataclass(frozen=True)
class ColorPalette:
    colors: np.ndarray  # [20, 3]
    palette_id: str = "hsv20"

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.float64)
        if colors.shape != (2 * NUM_CLASSES, 3):
            raise ValidationError(f"palette needs {2 * NUM_CLASSES} RGB colors")
        if colors.min() < 0 or colors.max() > 1:
            raise ValidationError("palette colors must lie in [0, 1]^3")
        d = np.linalg.norm(colors[:, None] - colors[None], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        if d.min() <= 0.05:
            raise ValidationError(f"palette colors too close (min distance {d.min():.3f})")
        object.__setattr__(self, "colors", colors)

    def assigned(self, digit: int) -> tuple[int, int]:
        return 2 * digit, 2 * digit + 1

    @classmethod
    def hsv(cls, saturation=0.8, value=0.9) -> ColorPalette:
        hues = np.arange(2 * NUM_CLASSES) / (2 * NUM_CLASSES)
        rgb = np.array([colorsys.hsv_to_rgb(h, saturation, value) for h in hues])
        return cls(rgb, f"hsv20-s{saturation}-v{value}")


def colorize(gray: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Mix a white stroke over a background: ``p*(1,1,1) + (1-p)*bg``."""
    p = np.asarray(gray, dtype=np.float32)
    bg = np.asarray(background, dtype=np.float32)[:, None, None, :]
    out = p + (1 - p) * bg
    return np.clip(out, 0.0, 1.0)


def _check_gray(gray: LabeledImageSet):
    if gray.images.shape[-1] != 1:
        raise DimensionError(f"expected single-channel images, got {gray.images.shape[-1]} channels")


def synth_colored_mnist(
    gray: LabeledImageSet,
    palette: ColorPalette,
    mode: str,
    seed: int,
    *,
    unseen_hues: bool = False,
) -> LabeledImageSet:
    """Recolor grayscale digits onto background colors.

    Confounded modes pick uniformly between the digit's two assigned colors;
    ``test_causal`` picks uniformly over all palette colors, independent of
    the label.  With ``unseen_hues`` the causal mode instead draws a
    continuous hue at the palette's saturation/value, and the nuisance column
    holds the hue in [0, 1).
    """
    _check_gray(gray)
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    n = len(gray)
    u = counter_uniform(seed, MODES.index(mode), np.arange(n))
    k = palette.colors.shape[0]
    if mode == "test_causal" and unseen_hues:
        hsv = np.array(colorsys.rgb_to_hsv(*palette.colors[0]))
        bg = np.array([colorsys.hsv_to_rgb(h, hsv[1], hsv[2]) for h in u])
        nuisance = u[:, None]
    else:
        if mode == "test_causal":
            index = np.minimum((u * k).astype(np.int64), k - 1)
        else:
            index = 2 * gray.labels + (u >= 0.5)
        bg = palette.colors[index]
        nuisance = np.eye(k, dtype=np.float32)[index]
    images = colorize(gray.images, bg)
    return LabeledImageSet(
        images,
        gray.labels.copy(),
        nuisance,
        palette.palette_id,
        {"mode": mode, "seed": seed, "unseen_hues": unseen_hues},
    )


def color_index(dataset: LabeledImageSet) -> np.ndarray:
    if dataset.nuisance is None:
        raise ValidationError("dataset has no nuisance annotations")
    return np.argmax(dataset.nuisance, axis=1)


# -- MNIST source ------------------------------------------------------------


def load_gray_mnist(images_path, labels_path) -> LabeledImageSet:
    return LabeledImageSet(load_idx(images_path), load_idx(labels_path))


def export_bundled_mnist(directory, test_per_class: int = 100) -> dict[str, Path]:
    """Write the 5000-image MNIST subset shipped with ``mlxtend`` as IDX files.

    Splits per class: the last ``test_per_class`` images of every digit go to
    the test files.  Returns the four paths.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.reshape(-1, 28, 28).astype(np.uint8)
    test = np.zeros(len(y), dtype=bool)
    for digit in range(NUM_CLASSES):
        idx = np.flatnonzero(y == digit)
        test[idx[len(idx) - test_per_class:]] = True
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {
        "train_images": d / "train-images-idx3-ubyte",
        "train_labels": d / "train-labels-idx1-ubyte",
        "test_images": d / "t10k-images-idx3-ubyte",
        "test_labels": d / "t10k-labels-idx1-ubyte",
    }
    write_idx_images(paths["train_images"], X[~test])
    write_idx_labels(paths["train_labels"], y[~test])
    write_idx_images(paths["test_images"], X[test])
    write_idx_labels(paths["test_labels"], y[test])
    return paths


# -- structural causal models ------------------------------------------------


def _check_cpt(name, table, atol=1e-9):
    t = np.asarray(table, dtype=np.float64)
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if not np.allclose(t.sum(axis=-1), 1.0, atol=atol, rtol=0):
        raise ValidationError(f"rows of {name} must sum to 1")
    return t


@dataclass
class ScmDiscrete:
    """Discrete SCM over C -> Z -> X -> Y with C -> Y.

    ``p_y_given_xc[x, c, y]``; F is folded into the noise of ``p_x_given_z``.
    """

    p_c: np.ndarray
    p_z_given_c: np.ndarray
    p_x_given_z: np.ndarray
    p_y_given_xc: np.ndarray

    def __post_init__(self):
        self.p_c = _check_cpt("P(C)", self.p_c)
        self.p_z_given_c = _check_cpt("P(Z|C)", self.p_z_given_c)
        self.p_x_given_z = _check_cpt("P(X|Z)", self.p_x_given_z)
        self.p_y_given_xc = _check_cpt("P(Y|X,C)", self.p_y_given_xc)
        nc, nz, nx = self.p_c.shape[0], self.p_z_given_c.shape[1], self.p_x_given_z.shape[1]
        if self.p_z_given_c.shape[0] != nc or self.p_x_given_z.shape[0] != nz:
            raise ValidationError("CPT shapes are inconsistent")
        if self.p_y_given_xc.shape[:2] != (nx, nc):
            raise ValidationError("P(Y|X,C) must have shape [|X|, |C|, |Y|]")

    @property
    def cardinalities(self) -> tuple[int, int, int, int]:
        return (
            self.p_c.shape[0],
            self.p_z_given_c.shape[1],
            self.p_x_given_z.shape[1],
            self.p_y_given_xc.shape[2],
        )

    @classmethod
    def random(cls, rng: np.random.Generator, cards=(2, 3, 2, 2), concentration=1.0):
        nc, nz, nx, ny = cards
        d = lambda *shape: rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])
        return cls(d(nc), d(nc, nz), d(nz, nx), d(nx, nc, ny))

    def with_exogenous_z(self, p_z) -> ScmDiscrete:
        """The mutilated model after intervening on Z: C -> Z is cut."""
        p_z = np.asarray(p_z, dtype=np.float64)
        return ScmDiscrete(
            self.p_c, np.tile(p_z, (self.p_c.shape[0], 1)), self.p_x_given_z, self.p_y_given_xc
        )


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    u = rng.random(probs.shape[:-1])[..., None]
    return (u >= cdf).sum(axis=-1)


def sample_discrete_scm(scm: ScmDiscrete, n: int, seed: int, *, do_x: int | None = None):
    """Ancestral sampling; returns a dict of int arrays ``c, z, x, y``.

    ``do_x`` fixes X (cutting Z -> X), giving interventional draws.
    """
    rng = np.random.default_rng(seed)
    c = _categorical(rng, np.broadcast_to(scm.p_c, (n, scm.p_c.shape[0])))
    z = _categorical(rng, scm.p_z_given_c[c])
    x = _categorical(rng, scm.p_x_given_z[z])
    if do_x is not None:
        x = np.full(n, do_x, dtype=x.dtype)
    y = _categorical(rng, scm.p_y_given_xc[x, c])
    return {"c": c, "z": z, "x": x, "y": y}


@dataclass
class ScmLinear:
    """Linear-Gaussian SCM: ``X = a4 F + a5 Z_i + a6 Z_U + U_x``, ``Y = a1 C + b X + U_y``.

    ``Z_U = C + noise``.  ``Z_i = C + noise`` unless ``zi_intervened`` is set,
    in which case Z_i is exogenous (its edge from C is cut).
    """

    a1: float = 1.0
    a4: float = 1.0
    a5: float = 1.0
    a6: float = 1.0
    b: float = 0.5
    var_ux: float = 1.0
    var_uy: float = 1.0
    var_c: float = 1.0
    var_f: float = 1.0
    var_zi: float = 1.0
    var_zu: float = 1.0
    zi_intervened: bool = True

    def __post_init__(self):
        for name in ("var_ux", "var_uy", "var_c", "var_f", "var_zi", "var_zu"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")


def sample_linear_scm(scm: ScmLinear, n: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    sd = lambda v: np.sqrt(v)
    c = rng.normal(0, sd(scm.var_c), n)
    f = rng.normal(0, sd(scm.var_f), n)
    zi_noise = rng.normal(0, sd(scm.var_zi), n)
    zu_noise = rng.normal(0, sd(scm.var_zu), n)
    ux = rng.normal(0, sd(scm.var_ux), n)
    uy = rng.normal(0, sd(scm.var_uy), n)
    z_i = zi_noise if scm.zi_intervened else c + zi_noise
    z_u = c + zu_noise
    x = scm.a4 * f + scm.a5 * z_i + scm.a6 * z_u + ux
    y = scm.a1 * c + scm.b * x + uy
    return {"c": c, "f": f, "z_i": z_i, "z_u": z_u, "x": x, "y": y}
