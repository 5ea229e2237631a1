"""Shared domain types and primitives for continuous-treatment sensitivity analysis.

Everything here is an immutable value or a pure function; the estimation,
bootstrap and simulation modules build on these without further coordination.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class ApoBoundsError(Exception):
    """Base class for all package errors."""


class ValidationError(ApoBoundsError):
    """Invalid parameters or malformed input data."""


class NumericError(ApoBoundsError):
    """A numeric procedure failed (divergence, empty neighborhood, ...)."""


class TrainingDivergedError(NumericError):
    """Model training produced a non-finite loss."""


class FineTuneFailedError(NumericError):
    """Every hyperparameter candidate diverged during fine-tuning."""


class EmptyNeighborhoodError(NumericError):
    """No observations received kernel weight near the requested treatment."""


class EmptyTailError(NumericError):
    """A tail index set required by a subset-form bound is empty."""


class UnbracketedRootError(NumericError):
    """Quantile inversion could not bracket the requested probability level."""


class CiUnreliableError(NumericError):
    """Too many bootstrap resamples failed for the CI to be trusted."""


def _as_float_vector(v, name: str) -> FloatArray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Dataset:
    """An observed sample: covariate matrix ``x`` (n, p), treatment ``t`` and outcome ``y``.

    All arrays must be finite, share the row count n >= 2, and p >= 1.
    """

    x: FloatArray
    t: FloatArray
    y: FloatArray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        t = _as_float_vector(self.t, "t")
        y = _as_float_vector(self.y, "y")
        if x.ndim != 2:
            raise ValidationError(f"x must be a 2-d matrix, got shape {x.shape}")
        n, p = x.shape
        if n < 2:
            raise ValidationError(f"need at least 2 observations, got {n}")
        if p < 1:
            raise ValidationError("need at least one covariate column")
        if t.shape[0] != n or y.shape[0] != n:
            raise ValidationError(
                f"row counts disagree: x has {n}, t has {t.shape[0]}, y has {y.shape[0]}"
            )
        for name, arr in (("x", x), ("t", t), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} contains non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        """Row-indexed view (copies); used by folds and bootstrap resamples."""
        idx = np.asarray(idx)
        return Dataset(self.x[idx], self.t[idx], self.y[idx])


class KernelFamily(str, enum.Enum):
    EPANECHNIKOV = "epanechnikov"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class KernelSpec:
    """A symmetric kernel plus bandwidth ``h`` (treatment units), h > 0."""

    family: KernelFamily = KernelFamily.EPANECHNIKOV
    h: float = 1.0

    def __post_init__(self):
        family = KernelFamily(self.family)
        object.__setattr__(self, "family", family)
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValidationError(f"bandwidth must be finite and positive, got {self.h}")

    def with_h(self, h: float) -> "KernelSpec":
        return replace(self, h=float(h))


def _base_kernel(family: KernelFamily, u: FloatArray) -> FloatArray:
    if family is KernelFamily.EPANECHNIKOV:
        return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return np.exp(-0.5 * u * u) / _SQRT_2PI


def kernel_eval(spec: KernelSpec, s: float) -> float:
    """Evaluate the rescaled kernel K(s/h)/h at a single offset ``s``."""
    u = np.asarray(s, dtype=np.float64) / spec.h
    return float(_base_kernel(spec.family, u) / spec.h)


def kernel_weights(spec: KernelSpec, t: FloatArray, tau: float) -> FloatArray:
    """Vector of K_h(T_i - tau) over all observations."""
    u = (np.asarray(t, dtype=np.float64) - tau) / spec.h
    return _base_kernel(spec.family, u) / spec.h


def kernel_weights_grid(
    family: KernelFamily, t: FloatArray, tau: float, h_grid: FloatArray
) -> FloatArray:
    """(n, H) matrix of K_h(T_i - tau) across a whole bandwidth grid at once."""
    t = np.asarray(t, dtype=np.float64)
    h_grid = np.asarray(h_grid, dtype=np.float64)
    u = (t[:, None] - tau) / h_grid[None, :]
    return _base_kernel(family, u) / h_grid[None, :]


@dataclass(frozen=True)
class Sensitivity:
    """Sensitivity parameter pair: multiplicative cap ``Gamma`` >= 1 and gamma = Gamma/(1+Gamma).

    Gamma = 1 corresponds to ignorability (gamma = 1/2); gamma increases
    strictly toward 1 as Gamma grows.
    """

    gamma_big: float
    gamma: float = field(init=False)

    def __post_init__(self):
        g = float(self.gamma_big)
        if not (np.isfinite(g) and g >= 1.0):
            raise ValidationError(f"Gamma must be >= 1, got {self.gamma_big}")
        object.__setattr__(self, "gamma_big", g)
        object.__setattr__(self, "gamma", g / (1.0 + g))

    @property
    def tail_mass(self) -> float:
        """1 - gamma = 1/(1+Gamma), computed without cancellation."""
        return 1.0 / (1.0 + self.gamma_big)

    @property
    def tail_prefactor(self) -> float:
        """(2*gamma - 1)/gamma, the tail-mean coefficient; 0 at Gamma = 1."""
        return (self.gamma_big - 1.0) / self.gamma_big


def sensitivity_from_gamma_big(gamma_big: float) -> Sensitivity:
    """Build the (Gamma, gamma) pair from the user-chosen Gamma >= 1."""
    return Sensitivity(gamma_big)


def empirical_quantile(values: FloatArray, q) -> FloatArray | float:
    """Empirical quantile with linear interpolation between order statistics.

    This single convention (numpy's default, "type 7") is used everywhere a
    data quantile is taken: GPS trimming, the tau grid and bootstrap
    percentiles.
    """
    arr = _as_float_vector(values, "values")
    if arr.size == 0:
        raise ValidationError("cannot take a quantile of an empty vector")
    out = np.quantile(arr, q)
    return float(out) if np.isscalar(q) else np.asarray(out, dtype=np.float64)


TRIM_QUANTILE = 0.1


def trim_gps(gps: FloatArray) -> FloatArray:
    """Floor small propensity values at the empirical 0.1 quantile of the input.

    Entries below the quantile are replaced by it; everything else is
    untouched, so the map is idempotent and order-preserving on the
    untrimmed entries.
    """
    arr = _as_float_vector(gps, "gps")
    if arr.size == 0:
        raise ValidationError("gps vector is empty")
    if np.any(arr <= 0):
        raise ValidationError("gps entries must be strictly positive")
    floor = np.quantile(arr, TRIM_QUANTILE)
    return np.maximum(arr, floor)


def gps_trim_floor(gps: FloatArray) -> float:
    """The trimming threshold itself; frozen once per sample and reused on resamples."""
    arr = _as_float_vector(gps, "gps")
    if arr.size == 0:
        raise ValidationError("gps vector is empty")
    return float(np.quantile(arr, TRIM_QUANTILE))


def tau_grid(t: FloatArray, m: int) -> FloatArray:
    """``m`` equally spaced treatment values between the 0.05 and 0.95 quantiles of ``t``.

    Kernel estimates degrade near the boundary of the observed treatments,
    so analyses are restricted to this inner range.
    """
    if m < 1:
        raise ValidationError(f"grid size must be >= 1, got {m}")
    arr = _as_float_vector(t, "t")
    if arr.size < 2:
        raise ValidationError("need at least two treatment values")
    lo, hi = np.quantile(arr, [0.05, 0.95])
    if m == 1:
        return np.array([0.5 * (lo + hi)])
    return np.linspace(lo, hi, m)


@dataclass(frozen=True)
class NuisanceTable:
    """Per-observation nuisance values feeding the bound estimators.

    ``gps`` holds the (possibly trimmed) treatment density at each observed
    (x_i, t_i); ``eta_at_obs`` the outcome regression at the same points;
    ``q_lo``/``q_hi`` the conditional outcome quantiles of order 1-gamma and
    gamma. ``eta_at_tau`` is attached per queried treatment value via
    :meth:`at_tau`.
    """

    gps: FloatArray
    eta_at_obs: FloatArray
    q_lo: FloatArray
    q_hi: FloatArray
    eta_at_tau: FloatArray | None = None

    def __post_init__(self):
        gps = _as_float_vector(self.gps, "gps")
        eta = _as_float_vector(self.eta_at_obs, "eta_at_obs")
        q_lo = _as_float_vector(self.q_lo, "q_lo")
        q_hi = _as_float_vector(self.q_hi, "q_hi")
        n = gps.shape[0]
        if not (eta.shape[0] == q_lo.shape[0] == q_hi.shape[0] == n):
            raise ValidationError("nuisance vectors disagree on length")
        if np.any(gps <= 0):
            raise ValidationError("gps values must be strictly positive")
        if np.any(q_lo > q_hi + 1e-12):
            raise ValidationError("q_lo must not exceed q_hi")
        object.__setattr__(self, "gps", gps)
        object.__setattr__(self, "eta_at_obs", eta)
        object.__setattr__(self, "q_lo", q_lo)
        object.__setattr__(self, "q_hi", q_hi)
        if self.eta_at_tau is not None:
            eta_tau = _as_float_vector(self.eta_at_tau, "eta_at_tau")
            if eta_tau.shape[0] != n:
                raise ValidationError("eta_at_tau length mismatch")
            object.__setattr__(self, "eta_at_tau", eta_tau)

    @property
    def n(self) -> int:
        return self.gps.shape[0]

    def at_tau(self, eta_at_tau: FloatArray) -> "NuisanceTable":
        """Return a copy with the per-row outcome regression at a query treatment attached."""
        return replace(self, eta_at_tau=eta_at_tau)

    def subset(self, idx) -> "NuisanceTable":
        idx = np.asarray(idx)
        return NuisanceTable(
            gps=self.gps[idx],
            eta_at_obs=self.eta_at_obs[idx],
            q_lo=self.q_lo[idx],
            q_hi=self.q_hi[idx],
            eta_at_tau=None if self.eta_at_tau is None else self.eta_at_tau[idx],
        )


@dataclass(frozen=True)
class BoundResult:
    """Bounds and bootstrap CI for one (tau, Gamma) cell.

    ``point`` is the ignorability point estimate, [pei_lo, pei_hi] the
    full-sample point estimate interval, [ci_lo, ci_hi] the percentile
    bootstrap interval at level 1 - alpha with ``B`` resamples, and
    ``h_minus``/``h_plus`` the selected bandwidths for each side.
    """

    tau: float
    gamma_big: float
    point: float
    pei_lo: float
    pei_hi: float
    ci_lo: float
    ci_hi: float
    h_minus: float
    h_plus: float
    alpha: float
    n_resamples: int

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.n_resamples < 1:
            raise ValidationError("need at least one bootstrap resample")
        if self.pei_lo > self.pei_hi:
            raise ValidationError("pei_lo must not exceed pei_hi")
