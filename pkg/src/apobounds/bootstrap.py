"""Nonparametric bootstrap: bandwidth selection and percentile confidence intervals.

Bandwidth selection resamples the observed triplets only, re-evaluating the
bound estimators with the nuisance values carried along (no refitting), and
picks the grid bandwidth minimizing the mean squared deviation from the
full-sample estimate. The percentile CI, in contrast, does refit the outcome
and treatment densities on every resample (warm-started from the full-sample
fit) while reusing the full-sample conditional quantiles, then intersects two
one-sided intervals built from the empirical quantiles of the resampled
bounds.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (
    CiUnreliableError,
    Dataset,
    EmptyNeighborhoodError,
    EmptyTailError,
    FloatArray,
    KernelSpec,
    NuisanceTable,
    NumericError,
    Sensitivity,
    TrainingDivergedError,
    ValidationError,
    empirical_quantile,
    gps_trim_floor,
    kernel_weights_grid,
)
from .density import DensityModel, model_mean_batch, model_pdf_batch
from .estimators import BoundForm, ordered_pair, sharp_bounds_sample, sign_form_weights
from .quantile import mixture_quantile_batch

Resampler = Callable[[np.random.Generator, int], np.ndarray]


def _default_grid() -> FloatArray:
    return np.linspace(0.1, 2.5, 40)


@dataclass(frozen=True)
class BootstrapConfig:
    """Resampling configuration shared by bandwidth selection and the CI."""

    n_resamples: int = 100
    alpha: float = 0.05
    bandwidth_grid: FloatArray = field(default_factory=_default_grid)
    seed: int = 0
    refit_epochs_cap: int = 20

    def __post_init__(self):
        if self.n_resamples < 1:
            raise ValidationError("need at least one resample")
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        grid = np.asarray(self.bandwidth_grid, dtype=np.float64)
        if grid.ndim != 1 or grid.size == 0:
            raise ValidationError("bandwidth grid must be a nonempty vector")
        if np.any(grid <= 0) or np.any(np.diff(grid) < 0):
            raise ValidationError("bandwidth grid must be positive and sorted ascending")
        if self.refit_epochs_cap < 0:
            raise ValidationError("refit_epochs_cap must be >= 0")
        object.__setattr__(self, "bandwidth_grid", grid)


def _resample_streams(seed: int, count: int) -> list[np.random.Generator]:
    # one independent child stream per resample index keeps parallel and
    # serial execution byte-identical
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def _grid_bound_pair(
    t: FloatArray,
    resid_over_gps: FloatArray,
    inv_gps: FloatArray,
    w_lo: FloatArray,
    w_hi: FloatArray,
    in_lo: FloatArray,
    in_hi: FloatArray,
    eta_bar: float,
    kernel: KernelSpec,
    h_grid: FloatArray,
    sens: Sensitivity,
    form: BoundForm,
    stabilized: bool,
) -> tuple[FloatArray, FloatArray]:
    """Bound estimates (lower, upper), each of length len(h_grid), for fixed rows."""
    kw = kernel_weights_grid(kernel.family, t, 0.0, h_grid)  # caller pre-centers t
    n = t.shape[0]
    if form is BoundForm.SIGN:
        num_lo = (resid_over_gps * w_lo) @ kw
        num_hi = (resid_over_gps * w_hi) @ kw
        if stabilized:
            den_lo = (inv_gps * w_lo) @ kw
            den_hi = (inv_gps * w_hi) @ kw
            if np.any(den_lo == 0.0) or np.any(den_hi == 0.0):
                raise EmptyNeighborhoodError("no kernel mass for some grid bandwidth")
            return eta_bar + num_lo / den_lo, eta_bar + num_hi / den_hi
        return eta_bar + num_lo / n, eta_bar + num_hi / n
    prefactor = sens.tail_prefactor
    if prefactor == 0.0:
        flat = np.full(h_grid.shape, eta_bar)
        return flat, flat.copy()
    n_lo, n_hi = int(in_lo.sum()), int(in_hi.sum())
    if n_lo == 0 or n_hi == 0:
        raise EmptyTailError("empty tail index set on a resample")
    num_lo = (resid_over_gps * in_lo) @ kw
    num_hi = (resid_over_gps * in_hi) @ kw
    if stabilized:
        den_lo = (inv_gps * in_lo) @ kw
        den_hi = (inv_gps * in_hi) @ kw
        if np.any(den_lo == 0.0) or np.any(den_hi == 0.0):
            raise EmptyNeighborhoodError("no kernel mass on a tail set")
        return eta_bar + prefactor * num_lo / den_lo, eta_bar + prefactor * num_hi / den_hi
    return eta_bar + prefactor * num_lo / n_lo, eta_bar + prefactor * num_hi / n_hi


def pilot_bandwidth(t: FloatArray, grid: FloatArray) -> float:
    """Theory-rate pilot sd(t) * n^(-1/5), clipped into the grid range."""
    t = np.asarray(t, dtype=np.float64)
    h0 = float(np.std(t)) * t.shape[0] ** (-0.2)
    return float(min(max(h0, grid[0]), grid[-1]))


def select_bandwidth(
    data: Dataset,
    nuis: NuisanceTable,
    tau: float,
    sens: Sensitivity,
    cfg: BootstrapConfig,
    kernel: KernelSpec = KernelSpec(),
    form: BoundForm = BoundForm.SIGN,
    stabilized: bool = False,
    resampler: Resampler | None = None,
) -> tuple[float, float]:
    """Pick (h_minus, h_plus) by bootstrap mean squared error around a pilot estimate.

    For every grid bandwidth and every with-replacement resample of the data
    triplets, the bound pair is recomputed with the per-row nuisance values
    resampled alongside (nothing is refit here) and scored against the
    full-sample estimate at the theory-rate pilot bandwidth sd(t) * n^(-1/5).
    Scoring against a fixed pilot keeps the squared-bias component in the
    objective; scoring each h against the full-sample estimate at the same h
    would cancel it and always select maximal smoothing. Near-ties are
    resolved toward the smaller bandwidth: the smallest h whose objective is
    within the resampling noise band of the minimum wins.
    """
    if nuis.eta_at_tau is None:
        raise ValidationError("eta_at_tau missing: attach it via NuisanceTable.at_tau")
    h_grid = cfg.bandwidth_grid
    n = data.n
    resid_over_gps = (data.y - nuis.eta_at_obs) / nuis.gps
    inv_gps = 1.0 / nuis.gps
    w_lo, w_hi = sign_form_weights(data.y, nuis.q_lo, nuis.q_hi, sens)
    in_lo = (data.y <= nuis.q_lo).astype(np.float64)
    in_hi = (data.y > nuis.q_hi).astype(np.float64)
    t_centered = data.t - tau

    def pair_for(idx: np.ndarray, grid: FloatArray) -> tuple[FloatArray, FloatArray]:
        return _grid_bound_pair(
            t_centered[idx],
            resid_over_gps[idx],
            inv_gps[idx],
            w_lo[idx],
            w_hi[idx],
            in_lo[idx],
            in_hi[idx],
            float(np.mean(nuis.eta_at_tau[idx])),
            kernel,
            grid,
            sens,
            BoundForm(form),
            stabilized,
        )

    all_rows = np.arange(n)
    pilot = np.array([pilot_bandwidth(data.t, h_grid)])
    ref_lo, ref_hi = pair_for(all_rows, pilot)
    sq_lo = np.zeros(h_grid.shape)
    sq_hi = np.zeros(h_grid.shape)
    for rng in _resample_streams(cfg.seed, cfg.n_resamples):
        idx = resampler(rng, n) if resampler is not None else rng.integers(0, n, size=n)
        lo_b, hi_b = pair_for(np.asarray(idx), h_grid)
        sq_lo += (lo_b - ref_lo[0]) ** 2
        sq_hi += (hi_b - ref_hi[0]) ** 2
    slack = 1.0 + math.sqrt(2.0 / cfg.n_resamples)
    h_minus = float(h_grid[int(np.argmax(sq_lo <= sq_lo.min() * slack))])
    h_plus = float(h_grid[int(np.argmax(sq_hi <= sq_hi.min() * slack))])
    return h_minus, h_plus


def percentile_interval(
    lower_draws: FloatArray, upper_draws: FloatArray, alpha: float
) -> tuple[float, float]:
    """Intersect the two one-sided (1 - alpha/2) intervals from resampled bounds."""
    if not (0.0 < alpha < 1.0):
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    return (
        float(empirical_quantile(np.asarray(lower_draws, dtype=np.float64), alpha / 2.0)),
        float(empirical_quantile(np.asarray(upper_draws, dtype=np.float64), 1.0 - alpha / 2.0)),
    )


def compute_nuisances(
    data: Dataset,
    outcome_model: DensityModel,
    gps_model: DensityModel,
    sens: Sensitivity,
    trim_floor: float | None = None,
    quantile_bracket: tuple[float, float] = (-10.0, 10.0),
) -> tuple[NuisanceTable, float]:
    """Per-observation nuisance values from a fitted model pair.

    Returns the table (without eta_at_tau) and the trimming floor actually
    applied, so resamples can reuse the frozen floor.
    """
    gps_raw = model_pdf_batch(gps_model, data.x, data.t)
    if trim_floor is None:
        positive = gps_raw[gps_raw > 0]
        if positive.size == 0:
            raise NumericError("estimated treatment density vanished on every row")
        trim_floor = gps_trim_floor(positive)
    gps = np.maximum(gps_raw, trim_floor)
    w, mu, var = outcome_model.query_batch(data.x, data.t)
    eta_at_obs = np.sum(w * mu, axis=1)
    q_lo = mixture_quantile_batch(w, mu, var, 1.0 - sens.gamma, bracket=quantile_bracket)
    q_hi = mixture_quantile_batch(w, mu, var, sens.gamma, bracket=quantile_bracket)
    table = NuisanceTable(gps=gps, eta_at_obs=eta_at_obs, q_lo=q_lo, q_hi=q_hi)
    return table, float(trim_floor)


def percentile_ci(
    data: Dataset,
    models: tuple[DensityModel, DensityModel],
    tau: float,
    sens: Sensitivity,
    h_pair: tuple[float, float],
    cfg: BootstrapConfig,
    kernel: KernelSpec = KernelSpec(),
    form: BoundForm = BoundForm.SIGN,
    stabilized: bool = True,
    resampler: Resampler | None = None,
) -> tuple[float, float, float, float]:
    """(ci_lo, ci_hi, pei_lo, pei_hi) for the bound pair at treatment ``tau``.

    Each resample refits both densities (warm start, capped epochs) and
    re-evaluates the bounds; conditional quantiles are frozen at their
    full-sample values. A resample that fails numerically is retried once
    with a fresh stream and then skipped; more than 10% skips invalidate
    the interval.
    """
    outcome_model, gps_model = models
    h_minus, h_plus = h_pair
    nuis, trim_floor = compute_nuisances(data, outcome_model, gps_model, sens)
    eta_at_tau = model_mean_batch(outcome_model, data.x, np.full(data.n, tau))
    nuis_tau = nuis.at_tau(eta_at_tau)

    pei_lo = sharp_bounds_sample(
        data, nuis_tau, kernel.with_h(h_minus), tau, sens, form, stabilized
    )[0]
    pei_hi = sharp_bounds_sample(
        data, nuis_tau, kernel.with_h(h_plus), tau, sens, form, stabilized
    )[1]
    pei_lo, pei_hi = ordered_pair(pei_lo, pei_hi, "point estimate interval")

    n = data.n
    streams = _resample_streams(cfg.seed, 2 * cfg.n_resamples)
    lo_draws, hi_draws = [], []
    skipped = 0
    for b in range(cfg.n_resamples):
        value = None
        for attempt in range(2):
            rng = streams[2 * b + attempt]
            idx = resampler(rng, n) if resampler is not None else rng.integers(0, n, size=n)
            idx = np.asarray(idx)
            try:
                value = _resample_bounds(
                    data,
                    models,
                    idx,
                    nuis,
                    trim_floor,
                    tau,
                    sens,
                    (h_minus, h_plus),
                    kernel,
                    BoundForm(form),
                    stabilized,
                    cfg.refit_epochs_cap,
                )
                break
            except (NumericError, TrainingDivergedError) as exc:
                if attempt == 1:
                    warnings.warn(f"resample {b} skipped: {exc}", stacklevel=2)
        if value is None:
            skipped += 1
        else:
            lo_draws.append(value[0])
            hi_draws.append(value[1])
    if skipped > 0.1 * cfg.n_resamples:
        raise CiUnreliableError(
            f"{skipped}/{cfg.n_resamples} resamples failed; interval not reliable"
        )
    ci_lo, ci_hi = percentile_interval(np.array(lo_draws), np.array(hi_draws), cfg.alpha)
    ci_lo, ci_hi = ordered_pair(ci_lo, ci_hi, "confidence interval")
    return ci_lo, ci_hi, pei_lo, pei_hi


def _resample_bounds(
    data: Dataset,
    models: tuple[DensityModel, DensityModel],
    idx: np.ndarray,
    full_nuis: NuisanceTable,
    trim_floor: float,
    tau: float,
    sens: Sensitivity,
    h_pair: tuple[float, float],
    kernel: KernelSpec,
    form: BoundForm,
    stabilized: bool,
    epochs_cap: int,
) -> tuple[float, float]:
    outcome_model, gps_model = models
    resample = data.subset(idx)
    outcome_b = outcome_model.refit(resample, epochs_cap)
    gps_b = gps_model.refit(resample, epochs_cap)
    gps_vals = np.maximum(model_pdf_batch(gps_b, resample.x, resample.t), trim_floor)
    eta_obs = model_mean_batch(outcome_b, resample.x, resample.t)
    eta_tau = model_mean_batch(outcome_b, resample.x, np.full(resample.n, tau))
    nuis_b = NuisanceTable(
        gps=gps_vals,
        eta_at_obs=eta_obs,
        q_lo=full_nuis.q_lo[idx],
        q_hi=full_nuis.q_hi[idx],
        eta_at_tau=eta_tau,
    )
    lo = sharp_bounds_sample(
        resample, nuis_b, kernel.with_h(h_pair[0]), tau, sens, form, stabilized
    )[0]
    hi = sharp_bounds_sample(
        resample, nuis_b, kernel.with_h(h_pair[1]), tau, sens, form, stabilized
    )[1]
    return ordered_pair(lo, hi, "resampled bounds")
