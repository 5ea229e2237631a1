"""Rival bound method: ratio-functional grid search with Monte-Carlo integration.

For each covariate row the conditional outcome law at the treatment of
interest is sampled, and a scalar threshold search maximizes (or minimizes)
the ratio E[kappa (Y - eta)] / ((Gamma^2 - 1)^{-1} + E[kappa]) over indicator
weight functions kappa. Candidate thresholds are the drawn order statistics
in both orientations, which contain an optimizer on the empirical measure
because the ratio is quasi-linear in kappa. Bounds for the average potential
outcome are the per-row bounds averaged over all observed covariates.

Monte-Carlo draws are derived from a counter-based stream keyed on the row
content, the seed and the treatment value: equal covariate rows draw equal
outcomes (so duplicated rows average to exactly the single-copy result), row
order never matters, and the whole integration vectorizes across rows.

This method needs fresh draws and a fresh threshold search for every
treatment value, which is what makes it slow next to the reweighting bounds;
it is kept as the comparison target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .core import Dataset, FloatArray, Sensitivity, ValidationError
from .density import DensityModel

_FloatPair = tuple[float, float]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = (z + _GOLDEN).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _row_keys(x: FloatArray, tau: float, seed: int) -> np.ndarray:
    """One 64-bit stream key per row, a pure function of (row bytes, tau, seed)."""
    bits = np.ascontiguousarray(x, dtype=np.float64).view(np.uint64)
    keys = np.full(x.shape[0], np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    for col in range(bits.shape[1]):
        keys = _splitmix64(keys ^ bits[:, col])
    tau_bits = np.array(tau, dtype=np.float64).view(np.uint64)
    return _splitmix64(keys ^ tau_bits)


def _uniforms(keys: np.ndarray, n_draws: int, offset: int) -> FloatArray:
    """(n, n_draws) uniforms in (0, 1) from counter-based expansion of the keys."""
    counters = np.arange(offset, offset + n_draws, dtype=np.uint64)
    words = _splitmix64(keys[:, None] ^ _splitmix64(counters)[None, :])
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)


@dataclass(frozen=True)
class BaselineConfig:
    """Monte-Carlo sample count per (row, treatment) and the RNG seed."""

    mc_samples: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.mc_samples < 2:
            raise ValidationError("need at least 2 Monte-Carlo samples")


def _mixture_draws(
    keys: np.ndarray,
    weights: FloatArray,
    means: FloatArray,
    variances: FloatArray,
    n_draws: int,
) -> FloatArray:
    """(n, n_draws) outcomes drawn row-wise from the conditional mixtures."""
    n, k = weights.shape
    z = ndtri(_uniforms(keys, n_draws, 0))
    if k == 1:
        return means[:, 0][:, None] + np.sqrt(variances[:, 0])[:, None] * z
    u_comp = _uniforms(keys, n_draws, n_draws)
    cum = np.cumsum(weights, axis=1)
    cum[:, -1] = 1.0
    comp = np.sum(cum[:, None, :] < u_comp[:, :, None], axis=2)
    rows = np.arange(n)[:, None]
    return means[rows, comp] + np.sqrt(variances[rows, comp]) * z


def _ratio_extrema_rows(
    draws: FloatArray, eta: FloatArray, gamma_big: float
) -> tuple[FloatArray, FloatArray]:
    """Row-wise min and max of the ratio functional over threshold indicators."""
    c = 1.0 / (gamma_big * gamma_big - 1.0)
    s = np.sort(draws, axis=1)
    n, m = s.shape
    num = (s - eta[:, None]) / m
    suffix_num = np.cumsum(num[:, ::-1], axis=1)[:, ::-1]
    suffix_mass = np.arange(m, 0, -1) / m
    prefix_num = np.cumsum(num, axis=1)
    prefix_mass = np.arange(1, m + 1) / m
    ratios = np.concatenate(
        [
            suffix_num / (c + suffix_mass)[None, :],
            prefix_num / (c + prefix_mass)[None, :],
            np.zeros((n, 1)),
        ],
        axis=1,
    )
    return ratios.min(axis=1), ratios.max(axis=1)


def _ratio_extrema(draws: FloatArray, eta: float, gamma_big: float) -> _FloatPair:
    """Scalar-row convenience wrapper used by the single-point entry point."""
    lo, hi = _ratio_extrema_rows(
        np.asarray(draws, dtype=np.float64)[None, :], np.array([eta]), gamma_big
    )
    return float(lo[0]), float(hi[0])


def baseline_capo_bounds_rows(
    model: DensityModel,
    x: FloatArray,
    tau: float,
    sens: Sensitivity,
    cfg: BaselineConfig,
    seed: int | None = None,
) -> tuple[FloatArray, FloatArray]:
    """Per-row (lower, upper) bounds over a whole covariate matrix."""
    if sens.gamma_big <= 1.0:
        raise ValidationError(
            "the ratio functional degenerates at Gamma = 1; use the point estimate"
        )
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    w, mu, var = model.query_batch(x, np.full(n, float(tau)))
    eta = np.sum(w * mu, axis=1)
    keys = _row_keys(x, float(tau), cfg.seed if seed is None else seed)
    draws = _mixture_draws(keys, w, mu, var, cfg.mc_samples)
    lo_corr, hi_corr = _ratio_extrema_rows(draws, eta, sens.gamma_big)
    return eta + lo_corr, eta + hi_corr


def baseline_capo_bounds(
    model: DensityModel,
    x: FloatArray,
    tau: float,
    sens: Sensitivity,
    cfg: BaselineConfig,
) -> _FloatPair:
    """(lower, upper) bounds of the conditional mean outcome at one covariate row."""
    lo, hi = baseline_capo_bounds_rows(
        model, np.atleast_2d(np.asarray(x, dtype=np.float64)), tau, sens, cfg
    )
    return float(lo[0]), float(hi[0])


def baseline_apo_bounds(
    model: DensityModel,
    data: Dataset,
    tau: float,
    sens: Sensitivity,
    cfg: BaselineConfig,
    seed: int | None = None,
) -> _FloatPair:
    """Average the per-row conditional bounds over every observed covariate row."""
    lo, hi = baseline_capo_bounds_rows(model, data.x, tau, sens, cfg, seed=seed)
    return float(np.mean(lo)), float(np.mean(hi))
