"""End-to-end sensitivity analysis: cross-fitted nuisances, bound grids, bootstrap.

The expensive bootstrap work (refitting the two density models on every
resample) is shared across all (tau, Gamma) grid cells, which is what keeps
the incremental cost of refining the treatment grid small. Results are
collected in deterministic grid order regardless of the worker count.
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .baseline import BaselineConfig, baseline_capo_bounds_rows
from .bootstrap import BootstrapConfig, percentile_interval, select_bandwidth
from .core import (
    BoundResult,
    CiUnreliableError,
    Dataset,
    FloatArray,
    KernelFamily,
    KernelSpec,
    NuisanceTable,
    NumericError,
    Sensitivity,
    ValidationError,
    gps_trim_floor,
    sensitivity_from_gamma_big,
    tau_grid,
)
from .density import (
    DensityModel,
    LinearGaussianModel,
    MdnConfig,
    fine_tune,
    fit_gps,
    fit_outcome_density,
)
from .estimators import (
    BoundForm,
    EstimatorKind,
    apo_point,
    ordered_pair,
    sharp_bounds_sample,
)
from .quantile import mixture_quantile_batch

METHOD_SHARP = "sharp"
METHOD_BASELINE = "baseline"


@dataclass(frozen=True)
class AffineParams:
    """Per-column centering/scaling, kept so results can be mapped back."""

    x_mean: FloatArray
    x_scale: FloatArray
    t_mean: float
    t_scale: float
    y_mean: float
    y_scale: float

    def to_json_obj(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "t_mean": self.t_mean,
            "t_scale": self.t_scale,
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
        }


def _scale_of(v: FloatArray) -> float:
    s = float(np.std(v))
    return s if s > 0 else 1.0


def standardize_dataset(data: Dataset) -> tuple[Dataset, AffineParams]:
    """Center and scale covariates, treatment and outcome; constant columns pass through."""
    x_mean = data.x.mean(axis=0)
    x_scale = data.x.std(axis=0)
    x_scale = np.where(x_scale > 0, x_scale, 1.0)
    params = AffineParams(
        x_mean=x_mean,
        x_scale=x_scale,
        t_mean=float(data.t.mean()),
        t_scale=_scale_of(data.t),
        y_mean=float(data.y.mean()),
        y_scale=_scale_of(data.y),
    )
    std = Dataset(
        (data.x - x_mean) / x_scale,
        (data.t - params.t_mean) / params.t_scale,
        (data.y - params.y_mean) / params.y_scale,
    )
    return std, params


# ---- cross-fitted nuisance predictions ----------------------------------------


@dataclass
class NuisancePredictor:
    """Per-fold density models plus the assignment of rows to prediction folds.

    Model k is trained on every fold except k and predicts rows of fold k,
    so no row is ever scored by a model that saw it. A predictor with
    ``fold_of_row is None`` uses a single model pair for all rows (the
    oracle / externally fitted path).
    """

    outcome_models: list[DensityModel]
    gps_models: list[DensityModel]
    fold_of_row: np.ndarray | None

    def _groups(self, rows: np.ndarray):
        if self.fold_of_row is None:
            yield 0, np.arange(rows.shape[0])
            return
        folds = self.fold_of_row[rows]
        for k in range(len(self.outcome_models)):
            positions = np.nonzero(folds == k)[0]
            if positions.size:
                yield k, positions

    def outcome_mixture(self, x: FloatArray, t: FloatArray, rows: np.ndarray):
        n = x.shape[0]
        k_comp = None
        w = mu = var = None
        for k, pos in self._groups(rows):
            wk, muk, vark = self.outcome_models[k].query_batch(x[pos], t[pos])
            if w is None:
                k_comp = wk.shape[1]
                w = np.empty((n, k_comp))
                mu = np.empty((n, k_comp))
                var = np.empty((n, k_comp))
            w[pos], mu[pos], var[pos] = wk, muk, vark
        return w, mu, var

    def gps_pdf(self, x: FloatArray, t: FloatArray, rows: np.ndarray) -> FloatArray:
        from .density import model_pdf_batch

        out = np.empty(x.shape[0])
        for k, pos in self._groups(rows):
            out[pos] = model_pdf_batch(self.gps_models[k], x[pos], t[pos])
        return out

    def eta_at(self, x: FloatArray, tau: float, rows: np.ndarray) -> FloatArray:
        out = np.empty(x.shape[0])
        for k, pos in self._groups(rows):
            w, mu, _ = self.outcome_models[k].query_batch(
                x[pos], np.full(pos.shape[0], tau)
            )
            out[pos] = np.sum(w * mu, axis=1)
        return out

    def refit(self, data: Dataset, idx: np.ndarray, epochs_cap: int) -> "NuisancePredictor":
        """Refit every fold model on the resampled rows from its own training folds."""
        if self.fold_of_row is None:
            resample = data.subset(idx)
            return NuisancePredictor(
                [self.outcome_models[0].refit(resample, epochs_cap)],
                [self.gps_models[0].refit(resample, epochs_cap)],
                None,
            )
        new_outcome, new_gps = [], []
        folds = self.fold_of_row[idx]
        for k in range(len(self.outcome_models)):
            train_positions = np.nonzero(folds != k)[0]
            if train_positions.size < 2:
                new_outcome.append(self.outcome_models[k])
                new_gps.append(self.gps_models[k])
                continue
            resample_k = data.subset(idx[train_positions])
            new_outcome.append(self.outcome_models[k].refit(resample_k, epochs_cap))
            new_gps.append(self.gps_models[k].refit(resample_k, epochs_cap))
        return NuisancePredictor(new_outcome, new_gps, self.fold_of_row)


def _is_refit_noop(model, epochs_cap: int) -> bool:
    """True when refitting at this cap provably returns the identical model object."""
    try:
        return model.refit(None, epochs_cap) is model
    except Exception:
        return False


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Deterministic near-equal split of rows into prediction folds."""
    if folds < 2:
        raise ValidationError("cross-fitting needs at least 2 folds")
    if folds > n:
        raise ValidationError("more folds than rows")
    perm = np.random.default_rng(seed).permutation(n)
    out = np.empty(n, dtype=int)
    out[perm] = np.arange(n) % folds
    return out


def cross_fit(
    data: Dataset,
    folds: int,
    seed: int,
    nuisance: str = "linear",
    mdn_config: MdnConfig | None = None,
    fine_tune_candidates: int = 0,
    fine_tune_splits: int = 2,
) -> NuisancePredictor:
    """Train one outcome-density and one treatment-density model per fold."""
    assignment = fold_assignment(data.n, folds, seed)
    outcome_models: list[DensityModel] = []
    gps_models: list[DensityModel] = []
    for k in range(folds):
        train_idx = np.nonzero(assignment != k)[0]
        predict_idx = np.nonzero(assignment == k)[0]
        if np.intersect1d(train_idx, predict_idx).size:
            raise AssertionError("cross-fitting folds overlap")
        train = data.subset(train_idx)
        if nuisance == "linear":
            outcome_models.append(LinearGaussianModel.fit_outcome(train))
            gps_models.append(LinearGaussianModel.fit_gps(train))
        elif nuisance == "mdn":
            cfg = mdn_config if mdn_config is not None else MdnConfig(seed=seed + k)
            if fine_tune_candidates > 0:
                cfg_out = fine_tune(
                    train,
                    n_candidates=fine_tune_candidates,
                    n_splits=fine_tune_splits,
                    seed=seed + 31 * k,
                    target="outcome",
                    max_epochs=cfg.max_epochs,
                )
                cfg_gps = fine_tune(
                    train,
                    n_candidates=fine_tune_candidates,
                    n_splits=fine_tune_splits,
                    seed=seed + 31 * k + 7,
                    target="gps",
                    max_epochs=cfg.max_epochs,
                )
            else:
                cfg_out = replace(cfg, seed=seed + 2 * k)
                cfg_gps = replace(cfg, seed=seed + 2 * k + 1)
            outcome_models.append(fit_outcome_density(train, cfg_out)[0])
            gps_models.append(fit_gps(train, cfg_gps)[0])
        else:
            raise ValidationError(f"unknown nuisance model {nuisance!r}")
    return NuisancePredictor(outcome_models, gps_models, assignment)


# ---- analysis configuration and records ----------------------------------------


@dataclass(frozen=True)
class AnalysisConfig:
    taus: tuple[float, ...] | None = None
    tau_count: int = 5
    gammas: tuple[float, ...] = (2.0,)
    n_resamples: int = 100
    alpha: float = 0.05
    bandwidth_grid: FloatArray = field(default_factory=lambda: np.linspace(0.1, 2.5, 40))
    seed: int = 0
    folds: int = 2
    nuisance: str = "mdn"
    mdn_config: MdnConfig | None = None
    fine_tune_candidates: int = 0
    fine_tune_splits: int = 2
    refit_epochs_cap: int = 20
    form: BoundForm = BoundForm.SIGN
    stabilized: bool = True
    kernel_family: KernelFamily = KernelFamily.EPANECHNIKOV
    method: str = "sharp"  # sharp | baseline | both
    baseline_mc: int = 500
    shared_bandwidth: bool = False
    rebandwidth: bool = False
    workers: int | None = 1
    standardize: bool = True

    def __post_init__(self):
        if not self.gammas:
            raise ValidationError("need at least one Gamma value")
        for g in self.gammas:
            if g < 1.0:
                raise ValidationError(f"Gamma values must be >= 1, got {g}")
        if self.taus is not None and len(self.taus) == 0:
            raise ValidationError("taus must be a nonempty list (or None for a grid)")
        if self.method not in (METHOD_SHARP, METHOD_BASELINE, "both"):
            raise ValidationError(f"unknown method {self.method!r}")
        if self.folds < 2:
            raise ValidationError("folds must be >= 2")
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError("alpha must lie in (0, 1)")
        if self.method in (METHOD_BASELINE, "both") and any(g <= 1.0 for g in self.gammas):
            raise ValidationError("the baseline method requires every Gamma > 1")


@dataclass(frozen=True)
class ResultRecord:
    """One (tau, Gamma, method) cell of the output grid plus run-level phase times."""

    bound: BoundResult
    method: str
    seconds: dict

    def to_json_obj(self) -> dict:
        b = self.bound

        def _num(v):
            return None if v is None or not np.isfinite(v) else float(v)

        return {
            "tau": float(b.tau),
            "gamma": float(b.gamma_big),
            "point": float(b.point),
            "pei_lo": float(b.pei_lo),
            "pei_hi": float(b.pei_hi),
            "ci_lo": float(b.ci_lo),
            "ci_hi": float(b.ci_hi),
            "h_minus": _num(b.h_minus),
            "h_plus": _num(b.h_plus),
            "alpha": float(b.alpha),
            "n_resamples": int(b.n_resamples),
            "method": self.method,
            "seconds": {k: float(v) for k, v in self.seconds.items()},
        }


RESULT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "array",
    "items": {
        "type": "object",
        "required": [
            "tau",
            "gamma",
            "point",
            "pei_lo",
            "pei_hi",
            "ci_lo",
            "ci_hi",
            "h_minus",
            "h_plus",
            "alpha",
            "n_resamples",
            "method",
            "seconds",
        ],
        "properties": {
            "tau": {"type": "number"},
            "gamma": {"type": "number", "minimum": 1},
            "point": {"type": "number"},
            "pei_lo": {"type": "number"},
            "pei_hi": {"type": "number"},
            "ci_lo": {"type": "number"},
            "ci_hi": {"type": "number"},
            "h_minus": {"type": ["number", "null"]},
            "h_plus": {"type": ["number", "null"]},
            "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "n_resamples": {"type": "integer", "minimum": 1},
            "method": {"enum": [METHOD_SHARP, METHOD_BASELINE]},
            "seconds": {
                "type": "object",
                "required": ["fit", "bounds", "bootstrap", "total"],
                "properties": {
                    "fit": {"type": "number", "minimum": 0},
                    "bounds": {"type": "number", "minimum": 0},
                    "bootstrap": {"type": "number", "minimum": 0},
                    "total": {"type": "number", "minimum": 0},
                },
                "additionalProperties": False,
            },
        },
        "additionalProperties": False,
    },
}


@dataclass
class SensitivityResult:
    records: list[ResultRecord]
    taus: FloatArray
    gammas: tuple[float, ...]
    seconds: dict

    def to_json_obj(self) -> list[dict]:
        return [r.to_json_obj() for r in self.records]


# ---- the run itself -------------------------------------------------------------


@dataclass
class _CellState:
    sens: Sensitivity
    q_lo: FloatArray
    q_hi: FloatArray
    h_minus: float = np.nan
    h_plus: float = np.nan
    pei_lo: float = np.nan
    pei_hi: float = np.nan
    point: float = np.nan
    lo_draws: list = field(default_factory=list)
    hi_draws: list = field(default_factory=list)
    base_lo: float = np.nan
    base_hi: float = np.nan
    base_lo_draws: list = field(default_factory=list)
    base_hi_draws: list = field(default_factory=list)


def run_sensitivity(
    data: Dataset,
    cfg: AnalysisConfig,
    predictor: NuisancePredictor | None = None,
) -> SensitivityResult:
    """Full analysis over the (tau, Gamma) grid; see the module docstring.

    When a ``predictor`` is supplied (oracle or externally fitted models) the
    data must already be on the scale those models expect, so
    ``cfg.standardize`` has to be False.
    """
    if predictor is not None and cfg.standardize:
        raise ValidationError("external predictors require standardize=False")
    t_start = time.perf_counter()

    # --- fit phase: scaling, cross-fitting, per-row nuisance predictions
    fit_start = t_start
    if cfg.standardize:
        std_data, affine = standardize_dataset(data)
    else:
        std_data = data
        affine = AffineParams(
            x_mean=np.zeros(data.p),
            x_scale=np.ones(data.p),
            t_mean=0.0,
            t_scale=1.0,
            y_mean=0.0,
            y_scale=1.0,
        )
    if predictor is None:
        predictor = cross_fit(
            std_data,
            cfg.folds,
            cfg.seed,
            nuisance=cfg.nuisance,
            mdn_config=cfg.mdn_config,
            fine_tune_candidates=cfg.fine_tune_candidates,
            fine_tune_splits=cfg.fine_tune_splits,
        )
    n = std_data.n
    all_rows = np.arange(n)
    taus_original = (
        np.asarray(cfg.taus, dtype=np.float64)
        if cfg.taus is not None
        else tau_grid(data.t, cfg.tau_count)
    )
    taus_std = (taus_original - affine.t_mean) / affine.t_scale

    gps_raw = predictor.gps_pdf(std_data.x, std_data.t, all_rows)
    positive = gps_raw[gps_raw > 0]
    if positive.size == 0:
        raise NumericError("estimated treatment density vanished on every row")
    trim_floor = gps_trim_floor(positive)
    gps = np.maximum(gps_raw, trim_floor)
    mix_w, mix_mu, mix_var = predictor.outcome_mixture(std_data.x, std_data.t, all_rows)
    eta_at_obs = np.sum(mix_w * mix_mu, axis=1)
    eta_at_tau = {
        ti: predictor.eta_at(std_data.x, float(taus_std[ti]), all_rows)
        for ti in range(taus_std.size)
    }

    cells: dict[tuple[int, int], _CellState] = {}
    for gi, g in enumerate(cfg.gammas):
        sens = sensitivity_from_gamma_big(g)
        q_lo = mixture_quantile_batch(mix_w, mix_mu, mix_var, 1.0 - sens.gamma)
        q_hi = mixture_quantile_batch(mix_w, mix_mu, mix_var, sens.gamma)
        for ti in range(taus_std.size):
            cells[(ti, gi)] = _CellState(sens=sens, q_lo=q_lo, q_hi=q_hi)
    fit_seconds = time.perf_counter() - fit_start

    # --- bounds phase: bandwidth selection, PEI and full-sample baseline
    bounds_start = time.perf_counter()
    boot_cfg = BootstrapConfig(
        n_resamples=cfg.n_resamples,
        alpha=cfg.alpha,
        bandwidth_grid=cfg.bandwidth_grid,
        seed=cfg.seed + 1,
        refit_epochs_cap=cfg.refit_epochs_cap,
    )
    kernel = KernelSpec(cfg.kernel_family, 1.0)
    do_sharp = cfg.method in (METHOD_SHARP, "both")
    do_baseline = cfg.method in (METHOD_BASELINE, "both")
    baseline_cfg = BaselineConfig(mc_samples=cfg.baseline_mc, seed=cfg.seed + 2)

    def _nuis_for(cell: _CellState, ti: int) -> NuisanceTable:
        return NuisanceTable(
            gps=gps,
            eta_at_obs=eta_at_obs,
            q_lo=cell.q_lo,
            q_hi=cell.q_hi,
            eta_at_tau=eta_at_tau[ti],
        )

    if do_sharp:
        mid_ti = taus_std.size // 2
        for gi in range(len(cfg.gammas)):
            shared_pair = None
            for ti in range(taus_std.size):
                cell = cells[(ti, gi)]
                nuis = _nuis_for(cell, ti)
                if cfg.shared_bandwidth:
                    if shared_pair is None:
                        mid_cell = cells[(mid_ti, gi)]
                        shared_pair = select_bandwidth(
                            std_data,
                            _nuis_for(mid_cell, mid_ti),
                            float(taus_std[mid_ti]),
                            mid_cell.sens,
                            boot_cfg,
                            kernel,
                        )
                    cell.h_minus, cell.h_plus = shared_pair
                else:
                    cell.h_minus, cell.h_plus = select_bandwidth(
                        std_data, nuis, float(taus_std[ti]), cell.sens, boot_cfg, kernel
                    )
                pei_lo = sharp_bounds_sample(
                    std_data,
                    nuis,
                    kernel.with_h(cell.h_minus),
                    float(taus_std[ti]),
                    cell.sens,
                    cfg.form,
                    cfg.stabilized,
                )[0]
                pei_hi = sharp_bounds_sample(
                    std_data,
                    nuis,
                    kernel.with_h(cell.h_plus),
                    float(taus_std[ti]),
                    cell.sens,
                    cfg.form,
                    cfg.stabilized,
                )[1]
                cell.pei_lo, cell.pei_hi = ordered_pair(
                    pei_lo, pei_hi, "point estimate interval"
                )
                kind = (
                    EstimatorKind.STAB_AUGMENTED if cfg.stabilized else EstimatorKind.PLAIN_DR
                )
                cell.point = apo_point(
                    std_data, nuis, kernel.with_h(cell.h_plus), float(taus_std[ti]), kind
                )

    baseline_row_cache: dict[tuple[int, int], tuple[FloatArray, FloatArray]] = {}
    if do_baseline:
        for (ti, gi), cell in cells.items():
            lo_rows, hi_rows = baseline_capo_bounds_rows(
                _FoldedOutcomeView(predictor, all_rows),
                std_data.x,
                float(taus_std[ti]),
                cell.sens,
                baseline_cfg,
                seed=cfg.seed + 1000 + 17 * ti + gi,
            )
            cell.base_lo = float(np.mean(lo_rows))
            cell.base_hi = float(np.mean(hi_rows))
            baseline_row_cache[(ti, gi)] = (lo_rows, hi_rows)
    bounds_seconds = time.perf_counter() - bounds_start

    # --- bootstrap phase: shared refits, all cells evaluated per resample
    boot_start = time.perf_counter()
    streams = np.random.SeedSequence(cfg.seed + 3).spawn(2 * cfg.n_resamples)
    refit_is_noop = _is_refit_noop(
        predictor.outcome_models[0], cfg.refit_epochs_cap
    ) and _is_refit_noop(predictor.gps_models[0], cfg.refit_epochs_cap)

    def one_resample(b: int):
        for attempt in range(2):
            rng = np.random.default_rng(streams[2 * b + attempt])
            idx = rng.integers(0, n, size=n)
            try:
                return _evaluate_resample(
                    std_data,
                    predictor,
                    idx,
                    cells,
                    taus_std,
                    eta_at_tau,
                    gps,
                    trim_floor,
                    kernel,
                    cfg,
                    baseline_cfg,
                    baseline_row_cache if refit_is_noop else None,
                    boot_cfg,
                    do_sharp,
                    do_baseline,
                    seed_tag=cfg.seed + 5000 + b,
                )
            except NumericError as exc:
                if attempt == 1:
                    warnings.warn(f"resample {b} skipped: {exc}", stacklevel=2)
        return None

    workers = cfg.workers if cfg.workers is not None else (os.cpu_count() or 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one_resample, range(cfg.n_resamples)))
    else:
        outcomes = [one_resample(b) for b in range(cfg.n_resamples)]

    skipped = sum(1 for o in outcomes if o is None)
    if skipped > 0.1 * cfg.n_resamples:
        raise CiUnreliableError(
            f"{skipped}/{cfg.n_resamples} resamples failed; intervals not reliable"
        )
    for outcome in outcomes:
        if outcome is None:
            continue
        sharp_part, base_part = outcome
        for key, (lo, hi) in sharp_part.items():
            cells[key].lo_draws.append(lo)
            cells[key].hi_draws.append(hi)
        for key, (lo, hi) in base_part.items():
            cells[key].base_lo_draws.append(lo)
            cells[key].base_hi_draws.append(hi)
    boot_seconds = time.perf_counter() - boot_start

    total = time.perf_counter() - t_start
    seconds = {
        "fit": fit_seconds,
        "bounds": bounds_seconds,
        "bootstrap": boot_seconds,
        "total": total,
    }

    records: list[ResultRecord] = []
    y_scale, y_mean = affine.y_scale, affine.y_mean

    def _to_out(v: float) -> float:
        return v * y_scale + y_mean

    for ti in range(taus_std.size):
        for gi, g in enumerate(cfg.gammas):
            cell = cells[(ti, gi)]
            if do_sharp:
                ci_lo, ci_hi = percentile_interval(
                    np.array(cell.lo_draws), np.array(cell.hi_draws), cfg.alpha
                )
                ci_lo, ci_hi = ordered_pair(ci_lo, ci_hi, "confidence interval")
                records.append(
                    ResultRecord(
                        BoundResult(
                            tau=float(taus_original[ti]),
                            gamma_big=float(g),
                            point=_to_out(cell.point),
                            pei_lo=_to_out(cell.pei_lo),
                            pei_hi=_to_out(cell.pei_hi),
                            ci_lo=_to_out(ci_lo),
                            ci_hi=_to_out(ci_hi),
                            h_minus=cell.h_minus,
                            h_plus=cell.h_plus,
                            alpha=cfg.alpha,
                            n_resamples=cfg.n_resamples,
                        ),
                        METHOD_SHARP,
                        seconds,
                    )
                )
            if do_baseline:
                ci_lo, ci_hi = percentile_interval(
                    np.array(cell.base_lo_draws), np.array(cell.base_hi_draws), cfg.alpha
                )
                point = cell.point if do_sharp else 0.5 * (cell.base_lo + cell.base_hi)
                records.append(
                    ResultRecord(
                        BoundResult(
                            tau=float(taus_original[ti]),
                            gamma_big=float(g),
                            point=_to_out(point),
                            pei_lo=_to_out(cell.base_lo),
                            pei_hi=_to_out(cell.base_hi),
                            ci_lo=_to_out(ci_lo),
                            ci_hi=_to_out(ci_hi),
                            h_minus=np.nan,
                            h_plus=np.nan,
                            alpha=cfg.alpha,
                            n_resamples=cfg.n_resamples,
                        ),
                        METHOD_BASELINE,
                        seconds,
                    )
                )
    return SensitivityResult(records, taus_original, cfg.gammas, seconds)


class _FoldedOutcomeView:
    """Outcome-model facade over a cross-fitted predictor for full-sample rows."""

    def __init__(self, predictor: NuisancePredictor, rows: np.ndarray):
        self._predictor = predictor
        self._rows = rows

    def query_batch(self, x: FloatArray, t: FloatArray | None = None):
        return self._predictor.outcome_mixture(
            x, np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)), self._rows
        )

    def query(self, x, t=None):
        raise NotImplementedError("row-wise scalar queries are not fold-aware")


def _evaluate_resample(
    std_data: Dataset,
    predictor: NuisancePredictor,
    idx: np.ndarray,
    cells: dict,
    taus_std: FloatArray,
    eta_at_tau_full: dict,
    gps_full: FloatArray,
    trim_floor: float,
    kernel: KernelSpec,
    cfg: AnalysisConfig,
    baseline_cfg: BaselineConfig,
    baseline_row_cache: dict | None,
    boot_cfg: BootstrapConfig,
    do_sharp: bool,
    do_baseline: bool,
    seed_tag: int,
):
    resample = std_data.subset(idx)
    refit = predictor.refit(std_data, idx, cfg.refit_epochs_cap)
    gps_b = np.maximum(refit.gps_pdf(resample.x, resample.t, idx), trim_floor)
    mix_w, mix_mu, _ = refit.outcome_mixture(resample.x, resample.t, idx)
    eta_obs_b = np.sum(mix_w * mix_mu, axis=1)

    sharp_out: dict[tuple[int, int], tuple[float, float]] = {}
    base_out: dict[tuple[int, int], tuple[float, float]] = {}
    eta_tau_b: dict[int, FloatArray] = {}
    for (ti, gi), cell in cells.items():
        if do_sharp:
            if ti not in eta_tau_b:
                eta_tau_b[ti] = refit.eta_at(resample.x, float(taus_std[ti]), idx)
            nuis_b = NuisanceTable(
                gps=gps_b,
                eta_at_obs=eta_obs_b,
                q_lo=cell.q_lo[idx],
                q_hi=cell.q_hi[idx],
                eta_at_tau=eta_tau_b[ti],
            )
            h_minus, h_plus = cell.h_minus, cell.h_plus
            if cfg.rebandwidth:
                h_minus, h_plus = select_bandwidth(
                    resample,
                    nuis_b,
                    float(taus_std[ti]),
                    cell.sens,
                    boot_cfg,
                    kernel,
                )
            lo = sharp_bounds_sample(
                resample,
                nuis_b,
                kernel.with_h(h_minus),
                float(taus_std[ti]),
                cell.sens,
                cfg.form,
                cfg.stabilized,
            )[0]
            hi = sharp_bounds_sample(
                resample,
                nuis_b,
                kernel.with_h(h_plus),
                float(taus_std[ti]),
                cell.sens,
                cfg.form,
                cfg.stabilized,
            )[1]
            sharp_out[(ti, gi)] = ordered_pair(lo, hi, "resampled bounds")
        if do_baseline:
            if baseline_row_cache is not None:
                lo_rows, hi_rows = baseline_row_cache[(ti, gi)]
                base_out[(ti, gi)] = (
                    float(np.mean(lo_rows[idx])),
                    float(np.mean(hi_rows[idx])),
                )
            else:
                lo_rows, hi_rows = baseline_capo_bounds_rows(
                    _FoldedOutcomeView(refit, idx),
                    resample.x,
                    float(taus_std[ti]),
                    cell.sens,
                    baseline_cfg,
                    seed=seed_tag + 100_003 * ti + 13 * gi,
                )
                base_out[(ti, gi)] = (float(np.mean(lo_rows)), float(np.mean(hi_rows)))
    return sharp_out, base_out


# ---- preprocessing ---------------------------------------------------------------


def log_transform_columns(
    matrix: FloatArray, columns: Sequence[int], labels: Sequence[str]
) -> FloatArray:
    """Apply a natural log to selected columns, rejecting nonpositive entries."""
    out = matrix.copy()
    for col, label in zip(columns, labels):
        bad = np.nonzero(out[:, col] <= 0)[0]
        if bad.size:
            rows = ", ".join(str(int(r)) for r in bad[:20])
            suffix = "..." if bad.size > 20 else ""
            raise ValidationError(
                f"column {label!r} has nonpositive entries at rows [{rows}{suffix}]; "
                "cannot log-transform"
            )
        out[:, col] = np.log(out[:, col])
    return out


def preprocess_dataset(
    data: Dataset,
    log_x_columns: Sequence[int] = (),
    log_x_labels: Sequence[str] | None = None,
    standardize: bool = True,
    hat_trim: float = 0.10,
) -> tuple[Dataset, AffineParams | None, np.ndarray]:
    """Log-transform, standardize and leverage-trim a raw dataset.

    Returns the processed dataset, the affine parameters used for
    standardization (None when disabled) and the surviving row indices
    relative to the input.
    """
    from .simulation import hat_outlier_keep_indices

    labels = (
        list(log_x_labels)
        if log_x_labels is not None
        else [f"x{c + 1}" for c in log_x_columns]
    )
    x = log_transform_columns(data.x, log_x_columns, labels)
    work = Dataset(x, data.t, data.y)
    affine = None
    if standardize:
        work, affine = standardize_dataset(work)
    keep = np.arange(work.n)
    if hat_trim > 0:
        keep = hat_outlier_keep_indices(work, hat_trim)
        work = work.subset(keep)
    return work, affine, keep


# ---- timing benchmark -------------------------------------------------------------


def benchmark_methods(
    data: Dataset,
    cfg: AnalysisConfig,
    m_values: Sequence[int] = (2, 3, 4),
) -> list[dict]:
    """Run both methods at increasing treatment-grid sizes and record wall times.

    Purely observational: returns one entry per (method, m) with the phase
    breakdown; asserts nothing about the numbers.
    """
    entries = []
    for m in m_values:
        for method in (METHOD_SHARP, METHOD_BASELINE):
            run_cfg = replace(cfg, method=method, tau_count=int(m), taus=None)
            result = run_sensitivity(data, run_cfg)
            entries.append(
                {
                    "method": method,
                    "m": int(m),
                    "seconds": {k: float(v) for k, v in result.seconds.items()},
                }
            )
    return entries
