"""Causal-effect bounds, strategy comparison, the log P(x|z) estimator and exact identification."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .datagen import ScmDiscrete
from .exceptions import IdentifiabilityError, ValidationError, WeakInstrumentError


@dataclass(frozen=True)
class CausalInterval:
    lower: float
    upper: float

    def __post_init__(self):
        if not 0 <= self.lower <= self.upper <= 1:
            raise ValidationError(f"invalid interval [{self.lower}, {self.upper}]")

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, value, tol=0.0) -> bool:
        return self.lower - tol <= value <= self.upper + tol

    def is_subset_of(self, other: CausalInterval, strict=False) -> bool:
        if strict:
            return other.lower < self.lower and self.upper < other.upper
        return other.lower <= self.lower and self.upper <= other.upper


@dataclass(frozen=True)
class StrategyBoundInput:
    p_yx_given_z: float
    p_x_given_z: float

    def __post_init__(self):
        if not 0 <= self.p_yx_given_z <= self.p_x_given_z <= 1:
            raise ValidationError(
                "need 0 <= P(y,x|z) <= P(x|z) <= 1, got "
                f"{self.p_yx_given_z}, {self.p_x_given_z}"
            )


def _bound(joint, marginal) -> CausalInterval:
    # lower + (1 - marginal): with exact (e.g. Fraction) inputs the width is exactly 1 - marginal
    return CausalInterval(joint, joint + (1 - marginal))


def natural_bound(p_xy, p_x) -> CausalInterval:
    """``[P(x,y), P(x,y) + 1 - P(x)]`` from observational data alone."""
    if not 0 <= p_xy <= p_x <= 1:
        raise ValidationError(f"need 0 <= P(x,y) <= P(x) <= 1, got {p_xy}, {p_x}")
    return _bound(p_xy, p_x)


def intervened_bound(inp: StrategyBoundInput) -> CausalInterval:
    """``[P(y,x|z), P(y,x|z) + 1 - P(x|z)]`` after intervening on z."""
    return _bound(inp.p_yx_given_z, inp.p_x_given_z)


@dataclass(frozen=True)
class StrategyComparison:
    verdict: str  # "a_tighter" | "b_tighter" | "equal"
    interval_a: CausalInterval
    interval_b: CausalInterval


def compare_strategies(a: StrategyBoundInput, b: StrategyBoundInput, p_y_given_x, tol=1e-9):
    """Pick the intervention with larger P(x|z); its interval nests in the other's."""
    for name, inp in (("a", a), ("b", b)):
        if abs(inp.p_yx_given_z - p_y_given_x * inp.p_x_given_z) > tol:
            raise ValidationError(
                f"strategy {name} is inconsistent with P(y|x)={p_y_given_x}: "
                f"P(y,x|z)={inp.p_yx_given_z}, P(x|z)={inp.p_x_given_z}"
            )
    ia, ib = intervened_bound(a), intervened_bound(b)
    if a.p_x_given_z > b.p_x_given_z:
        verdict, inner, outer = "a_tighter", ia, ib
    elif b.p_x_given_z > a.p_x_given_z:
        verdict, inner, outer = "b_tighter", ib, ia
    else:
        return StrategyComparison("equal", ia, ib)
    if not inner.is_subset_of(outer):
        raise AssertionError(f"interval {inner} does not nest in {outer}")
    return StrategyComparison(verdict, ia, ib)


# -- discrete SCM enumeration --------------------------------------------------


@dataclass
class ObservationalJoint:
    p_xy: np.ndarray  # [|X|, |Y|]
    p_x: np.ndarray  # [|X|]
    p_yx_given_z: np.ndarray  # [|Z|, |X|, |Y|]
    p_x_given_z: np.ndarray  # [|Z|, |X|]
    p_z: np.ndarray


def _joint(scm: ScmDiscrete) -> np.ndarray:
    """Full joint P(c, z, x, y) by enumeration."""
    return (
        scm.p_c[:, None, None, None]
        * scm.p_z_given_c[:, :, None, None]
        * scm.p_x_given_z[None, :, :, None]
        * np.transpose(scm.p_y_given_xc, (1, 0, 2))[:, None, :, :]
    )


def observational_joint_discrete(scm: ScmDiscrete) -> ObservationalJoint:
    joint = _joint(scm)
    p_zxy = joint.sum(axis=0)
    p_z = p_zxy.sum(axis=(1, 2))
    safe = np.where(p_z > 0, p_z, 1.0)
    p_yx_given_z = p_zxy / safe[:, None, None]
    p_xy = p_zxy.sum(axis=0)
    return ObservationalJoint(p_xy, p_xy.sum(axis=1), p_yx_given_z, p_yx_given_z.sum(axis=2), p_z)


def backdoor_adjust_discrete(scm: ScmDiscrete, x: int, y: int) -> float:
    """Exact ``P(y|do(x)) = sum_c P(y|x,c) P(c)``."""
    p_x_given_c = scm.p_z_given_c @ scm.p_x_given_z
    support = scm.p_c > 0
    if np.any(p_x_given_c[support, x] <= 0):
        raise IdentifiabilityError(f"positivity fails: P(x={x}|c) = 0 for some c with P(c) > 0")
    return float(np.sum(scm.p_y_given_xc[x, :, y] * scm.p_c))


# -- likelihood of real data under generated data ----------------------------


@dataclass
class LikelihoodReport:
    nearest_sq_distance: np.ndarray
    contributions: np.ndarray
    total: float
    tau: float

    @property
    def mean(self) -> float:
        return self.total / max(len(self.contributions), 1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query", "nearest_sq_distance", "log_contribution"])
        for i, (d, c) in enumerate(zip(self.nearest_sq_distance, self.contributions)):
            w.writerow([i, repr(float(d)), repr(float(c))])
        return buf.getvalue()


def _unit_rows(F, name):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] == 0:
        raise ValidationError(f"{name} must be a non-empty 2-D feature matrix")
    return F


def estimate_log_px_given_z(query_features, generated_features, tau=1.0, chunk=1024) -> LikelihoodReport:
    """Nearest-neighbour Gaussian-kernel estimate of ``log P(x|z)``.

    Each real query contributes ``-min_j ||f(x_i) - f(x'_j)||^2 / (2 tau^2)``,
    the log of a kernel capped at 1; the generator is deterministic given the
    intervention, so ``P(x'_j|z) = 1``.
    """
    if not tau > 0:
        raise ValidationError("tau must be positive")
    Q = _unit_rows(query_features, "query_features")
    G = _unit_rows(generated_features, "generated_features")
    if Q.shape[1] != G.shape[1]:
        raise ValidationError("query and generated features differ in dimension")
    g_sq = (G * G).sum(axis=1)
    nearest = np.empty(Q.shape[0])
    for a in range(0, Q.shape[0], chunk):
        q = Q[a:a + chunk]
        d = (q * q).sum(axis=1)[:, None] + g_sq[None, :] - 2.0 * q @ G.T
        nearest[a:a + chunk] = np.maximum(d.min(axis=1), 0.0)
    contributions = -nearest / (2.0 * tau * tau)
    return LikelihoodReport(nearest, contributions, float(np.sum(contributions)), float(tau))


def feature_extract(classifier, images) -> np.ndarray:
    """Unit-normalised penultimate activations of a trained classifier."""
    if not hasattr(classifier, "params_"):
        raise ValidationError("feature extraction needs a trained classifier")
    F = np.asarray(classifier.transform(images), dtype=np.float64)
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    # an all-zero ReLU row has no direction; give it a fixed unit vector
    zero = norms[:, 0] == 0
    F[zero] = 1.0 / np.sqrt(F.shape[1])
    norms[zero] = 1.0
    return (F / norms).astype(np.float32)


# -- linear instrumental variables ---------------------------------------------


def linear_iv_estimate(samples, floor=1e-3) -> float:
    """Ratio estimator ``cov(z, y) / cov(z, x)`` with a weak-instrument guard.

    The guard is a floor on ``|corr(z, x)|``: the larger of ``floor`` and four
    standard errors of a null sample correlation (``4 / sqrt(n)``), so a
    disconnected instrument is rejected at any sample size.
    """
    z = np.asarray(samples["z_i"], dtype=np.float64)
    x = np.asarray(samples["x"], dtype=np.float64)
    y = np.asarray(samples["y"], dtype=np.float64)
    n = len(z)
    if n < 3:
        raise ValidationError("need at least three samples")
    zc = z - z.mean()
    cov_zx = float(zc @ (x - x.mean())) / (n - 1)
    cov_zy = float(zc @ (y - y.mean())) / (n - 1)
    threshold = max(floor, 4.0 / np.sqrt(n)) * z.std(ddof=1) * x.std(ddof=1)
    if not abs(cov_zx) > threshold:
        raise WeakInstrumentError(
            f"|cov(z, x)| = {abs(cov_zx):.3g} is below the weak-instrument floor {threshold:.3g}"
        )
    return cov_zy / cov_zx
