"""Synthetic data with latent confounders and closed-form ground truth.

Observed covariates X and latent confounders U are jointly Gaussian with a
block covariance (tridiagonal within blocks, constant across). The treatment
is linear in (X, U) plus noise and the outcome adds a treatment-dependent
exponential term, so the average potential outcome, the conditional law of
the outcome and both treatment densities (with and without U) all have
closed forms. That makes this module the test bed for every estimator: it
provides oracle nuisance models satisfying the density-model contract, the
true bounds, and the density-ratio calibration of the sensitivity parameter.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .core import Dataset, FloatArray, Sensitivity, ValidationError
from .density import ConditionalGaussianMixture

_SQRT_2PI = float(np.sqrt(2.0 * np.pi))


def _vec(v, size: int, name: str) -> FloatArray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (size,):
        raise ValidationError(f"{name} must have shape ({size},), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class SimConfig:
    """Generation parameters; defaults reproduce the reference simulation setup."""

    p_x: int = 5
    p_u: int = 3
    rho_x: float = 0.3
    rho_u: float = 0.3
    lam: float = 0.5
    beta_x: FloatArray = field(default_factory=lambda: np.full(5, 0.3))
    beta_u: FloatArray = field(default_factory=lambda: np.full(3, 0.2))
    gamma_x: FloatArray = field(default_factory=lambda: np.full(5, 0.2))
    gamma_u: FloatArray = field(default_factory=lambda: np.array([0.4, 0.7, 0.7]))
    zeta: float = -0.3
    sigma_eps_t: float = 0.5
    sigma_eps_y: float = 0.7
    n: int = 1000
    seed: int = 1

    def __post_init__(self):
        if self.p_x < 1 or self.p_u < 1:
            raise ValidationError("p_x and p_u must be >= 1")
        if not (0.0 < self.rho_x < 1.0 and 0.0 < self.rho_u < 1.0):
            raise ValidationError("rho_x and rho_u must lie in (0, 1)")
        if not (0.0 <= self.lam < 1.0):
            raise ValidationError("lam must lie in [0, 1)")
        if self.sigma_eps_t < 0 or self.sigma_eps_y < 0:
            raise ValidationError("noise scales must be nonnegative")
        if self.n < 2:
            raise ValidationError("n must be >= 2")
        object.__setattr__(self, "beta_x", _vec(self.beta_x, self.p_x, "beta_x"))
        object.__setattr__(self, "beta_u", _vec(self.beta_u, self.p_u, "beta_u"))
        object.__setattr__(self, "gamma_x", _vec(self.gamma_x, self.p_x, "gamma_x"))
        object.__setattr__(self, "gamma_u", _vec(self.gamma_u, self.p_u, "gamma_u"))

    @property
    def rho_xu(self) -> float:
        """Cross-block correlation lam * (1 - rho_x) / p_u, keeping Sigma diagonally dominant."""
        return self.lam * (1.0 - self.rho_x) / self.p_u


def _tridiagonal(size: int, rho: float) -> FloatArray:
    m = np.eye(size)
    idx = np.arange(size - 1)
    m[idx, idx + 1] = rho
    m[idx + 1, idx] = rho
    return m


def build_sigma(cfg: SimConfig) -> FloatArray:
    """Joint covariance of (X, U): tridiagonal blocks linked by a constant block."""
    sig_x = _tridiagonal(cfg.p_x, cfg.rho_x)
    sig_u = _tridiagonal(cfg.p_u, cfg.rho_u)
    sig_xu = np.full((cfg.p_x, cfg.p_u), cfg.rho_xu)
    top = np.hstack([sig_x, sig_xu])
    bottom = np.hstack([sig_xu.T, sig_u])
    sigma = np.vstack([top, bottom])
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise ValidationError("joint covariance is not positive definite") from exc
    return sigma


def _sigma_blocks(cfg: SimConfig):
    sigma = build_sigma(cfg)
    p = cfg.p_x
    return sigma[:p, :p], sigma[:p, p:], sigma[p:, p:]


@dataclass(frozen=True)
class SimSample:
    """A generated sample plus everything needed to evaluate counterfactual outcomes.

    ``dataset`` holds the observed triplets; ``u`` the latent confounders.
    Potential outcomes reuse each row's frozen outcome noise, so the
    consistency identity y_i = Y_i(t_i) holds exactly.
    """

    dataset: Dataset
    u: FloatArray
    eps_y: FloatArray
    cfg: SimConfig

    @property
    def n(self) -> int:
        return self.dataset.n

    def potential_outcomes(self, t) -> FloatArray:
        """Vector of Y_i(t); ``t`` may be a scalar or a per-row vector."""
        g = self.dataset.x @ self.cfg.gamma_x
        ug = self.u @ self.cfg.gamma_u
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), g.shape)
        return t_arr + self.cfg.zeta * g * np.exp(-t_arr * g) - ug * g + self.eps_y

    def potential_outcome(self, i: int, t: float) -> float:
        g = float(self.dataset.x[i] @ self.cfg.gamma_x)
        ug = float(self.u[i] @ self.cfg.gamma_u)
        return t + self.cfg.zeta * g * np.exp(-t * g) - ug * g + float(self.eps_y[i])

    def subset(self, idx) -> "SimSample":
        idx = np.asarray(idx)
        return SimSample(self.dataset.subset(idx), self.u[idx], self.eps_y[idx], self.cfg)


def generate(cfg: SimConfig) -> SimSample:
    """Draw one sample: (X, U) jointly Gaussian, then treatment, then outcome."""
    rng = np.random.default_rng(cfg.seed)
    sigma = build_sigma(cfg)
    chol = np.linalg.cholesky(sigma)
    z = rng.standard_normal((cfg.n, cfg.p_x + cfg.p_u))
    xu = z @ chol.T
    x, u = xu[:, : cfg.p_x], xu[:, cfg.p_x :]
    eps_t = rng.normal(0.0, cfg.sigma_eps_t, size=cfg.n)
    eps_y = rng.normal(0.0, cfg.sigma_eps_y, size=cfg.n)
    t = x @ cfg.beta_x + u @ cfg.beta_u - 0.5 + eps_t
    g = x @ cfg.gamma_x
    y = t + cfg.zeta * g * np.exp(-t * g) - (u @ cfg.gamma_u) * g + eps_y
    return SimSample(Dataset(x, t, y), u, eps_y, cfg)


def true_apo(tau: float, cfg: SimConfig) -> float:
    """Closed-form average potential outcome at treatment ``tau``."""
    sig_x, sig_xu, _ = _sigma_blocks(cfg)
    a = float(cfg.gamma_x @ sig_x @ cfg.gamma_x)
    cross = float(cfg.gamma_u @ sig_xu.T @ cfg.gamma_x)
    return tau * (1.0 - cfg.zeta * a * np.exp(0.5 * tau * tau * a)) - cross


def true_capo(tau: float, x: FloatArray, cfg: SimConfig) -> float:
    """Closed-form conditional average potential outcome at (tau, x)."""
    sig_x, sig_xu, _ = _sigma_blocks(cfg)
    x = _vec(x, cfg.p_x, "x")
    g = float(x @ cfg.gamma_x)
    cond_mean_u = sig_xu.T @ np.linalg.solve(sig_x, x)
    return tau + cfg.zeta * g * np.exp(-tau * g) - float(cond_mean_u @ cfg.gamma_u) * g


# ---- leverage-based outlier removal ------------------------------------------


def hat_values(data: Dataset) -> FloatArray:
    """Leverage of each row in the intercept-augmented (X, T, Y) design."""
    design = np.column_stack([np.ones(data.n), data.x, data.t, data.y])
    u_mat, s, _ = np.linalg.svd(design, full_matrices=False)
    tol = s.max() * max(design.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(s > tol))
    if rank < design.shape[1]:
        warnings.warn(
            f"design matrix is rank deficient ({rank} < {design.shape[1]}); "
            "leverage computed through the pseudo-inverse",
            stacklevel=2,
        )
    return np.sum(u_mat[:, :rank] ** 2, axis=1)


def hat_outlier_keep_indices(data: Dataset, fraction: float = 0.10) -> FloatArray:
    """Indices surviving removal of the ceil(fraction * n) largest-leverage rows.

    Ties are broken by row index (earlier rows dropped first), which keeps
    the selection deterministic on duplicated data.
    """
    if not (0.0 <= fraction < 1.0):
        raise ValidationError(f"fraction must lie in [0, 1), got {fraction}")
    n = data.n
    if n <= data.p + 3:
        raise ValidationError("need n > p + 3 rows to compute leverages")
    if fraction == 0.0:
        return np.arange(n)
    lev = hat_values(data)
    n_drop = int(np.ceil(fraction * n))
    order = np.argsort(-lev, kind="stable")
    keep = np.setdiff1d(np.arange(n), order[:n_drop])
    return keep


def remove_hat_outliers(data: Dataset, fraction: float = 0.10) -> Dataset:
    """Drop the rows with the largest design-matrix leverage."""
    return data.subset(hat_outlier_keep_indices(data, fraction))


# ---- oracle densities ---------------------------------------------------------


def oracle_gps(x: FloatArray, cfg: SimConfig) -> tuple[float, float]:
    """Mean and variance of T given X = x (latent confounders marginalized out)."""
    sig_x, sig_xu, sig_u = _sigma_blocks(cfg)
    x = _vec(x, cfg.p_x, "x")
    solve_x = np.linalg.solve(sig_x, x)
    mean = float(cfg.beta_x @ x) - 0.5 + float(cfg.beta_u @ (sig_xu.T @ solve_x))
    cond_cov_u = sig_u - sig_xu.T @ np.linalg.solve(sig_x, sig_xu)
    var = cfg.sigma_eps_t**2 + float(cfg.beta_u @ cond_cov_u @ cfg.beta_u)
    return mean, var


def oracle_full_gps(x: FloatArray, u: FloatArray, cfg: SimConfig) -> tuple[float, float]:
    """Mean and variance of T given both X = x and U = u."""
    x = _vec(x, cfg.p_x, "x")
    u = _vec(u, cfg.p_u, "u")
    return float(cfg.beta_x @ x + cfg.beta_u @ u) - 0.5, cfg.sigma_eps_t**2


class _OutcomeConditioning:
    """Precomputed Gaussian-conditioning coefficients for <U, gamma_u> given (X, T)."""

    def __init__(self, cfg: SimConfig):
        sig_x, sig_xu, sig_u = _sigma_blocks(cfg)
        cov_x_t = sig_x @ cfg.beta_x + sig_xu @ cfg.beta_u
        var_t = (
            float(cfg.beta_x @ sig_x @ cfg.beta_x)
            + 2.0 * float(cfg.beta_x @ sig_xu @ cfg.beta_u)
            + float(cfg.beta_u @ sig_u @ cfg.beta_u)
            + cfg.sigma_eps_t**2
        )
        sigma_c = np.zeros((cfg.p_x + 1, cfg.p_x + 1))
        sigma_c[: cfg.p_x, : cfg.p_x] = sig_x
        sigma_c[: cfg.p_x, -1] = cov_x_t
        sigma_c[-1, : cfg.p_x] = cov_x_t
        sigma_c[-1, -1] = var_t
        cov_c_v = np.concatenate(
            [
                sig_xu @ cfg.gamma_u,
                [float(cfg.gamma_u @ (sig_xu.T @ cfg.beta_x + sig_u @ cfg.beta_u))],
            ]
        )
        self.coeffs = np.linalg.solve(sigma_c, cov_c_v)
        var_v = float(cfg.gamma_u @ sig_u @ cfg.gamma_u)
        self.cond_var_v = max(var_v - float(cov_c_v @ self.coeffs), 0.0)
        self.mean_c = np.concatenate([np.zeros(cfg.p_x), [-0.5]])

    def moments(self, x: FloatArray, t: FloatArray) -> tuple[FloatArray, float]:
        centered = np.column_stack([x, t]) - self.mean_c
        return centered @ self.coeffs, self.cond_var_v


def oracle_outcome_moments(
    x: FloatArray, t: FloatArray, cfg: SimConfig
) -> tuple[FloatArray, FloatArray]:
    """Vectorized mean and variance of Y given (X, T) rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    cond = _OutcomeConditioning(cfg)
    mean_v, var_v = cond.moments(x, t)
    g = x @ cfg.gamma_x
    mean = t + cfg.zeta * g * np.exp(-t * g) - g * mean_v
    var = g * g * var_v + cfg.sigma_eps_y**2
    return mean, var


def oracle_outcome_density(x: FloatArray, t: float, cfg: SimConfig) -> ConditionalGaussianMixture:
    """Exact single-Gaussian law of Y given (X = x, T = t)."""
    mean, var = oracle_outcome_moments(np.atleast_2d(_vec(x, cfg.p_x, "x")), float(t), cfg)
    return ConditionalGaussianMixture(np.array([1.0]), mean, var)


class OracleOutcomeModel:
    """Density-model view of the exact outcome law; refitting is a no-op."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self._cond = _OutcomeConditioning(cfg)

    def query_batch(self, x: FloatArray, t: FloatArray | None = None):
        if t is None:
            raise ValidationError("outcome oracle needs a treatment value")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        mean_v, var_v = self._cond.moments(x, t_arr)
        g = x @ self.cfg.gamma_x
        mean = t_arr + self.cfg.zeta * g * np.exp(-t_arr * g) - g * mean_v
        var = g * g * var_v + self.cfg.sigma_eps_y**2
        n = x.shape[0]
        return np.ones((n, 1)), mean[:, None], var[:, None]

    def query(self, x: FloatArray, t: float | None = None) -> ConditionalGaussianMixture:
        if t is None:
            raise ValidationError("outcome oracle needs a treatment value")
        return oracle_outcome_density(np.asarray(x, dtype=np.float64), float(t), self.cfg)

    def refit(self, data: Dataset, epochs_cap: int) -> "OracleOutcomeModel":
        return self


class OracleGpsModel:
    """Density-model view of the exact treatment density given X alone."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        sig_x, sig_xu, sig_u = _sigma_blocks(cfg)
        self._mean_coeffs = cfg.beta_x + np.linalg.solve(sig_x, sig_xu) @ cfg.beta_u
        cond_cov_u = sig_u - sig_xu.T @ np.linalg.solve(sig_x, sig_xu)
        self._var = cfg.sigma_eps_t**2 + float(cfg.beta_u @ cond_cov_u @ cfg.beta_u)

    def query_batch(self, x: FloatArray, t: FloatArray | None = None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        mean = x @ self._mean_coeffs - 0.5
        return np.ones((n, 1)), mean[:, None], np.full((n, 1), self._var)

    def query(self, x: FloatArray, t: float | None = None) -> ConditionalGaussianMixture:
        w, mu, var = self.query_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return ConditionalGaussianMixture(w[0], mu[0], var[0])

    def refit(self, data: Dataset, epochs_cap: int) -> "OracleGpsModel":
        return self


# ---- ground-truth bounds and sensitivity calibration --------------------------


def true_sharp_capo_bounds(
    tau: float, x: FloatArray, cfg: SimConfig, sens: Sensitivity
) -> tuple[float, float]:
    """Population sharp bounds at (tau, x) from the Gaussian tail-mean closed form."""
    mean, var = oracle_outcome_moments(np.atleast_2d(_vec(x, cfg.p_x, "x")), float(tau), cfg)
    mu, sd = float(mean[0]), float(np.sqrt(var[0]))
    z = ndtri(sens.gamma)
    pdf_z = np.exp(-0.5 * z * z) / _SQRT_2PI
    shift = sens.tail_prefactor * sd * pdf_z / sens.tail_mass
    return mu - shift, mu + shift


def true_sharp_apo_bounds(
    tau: float, cfg: SimConfig, sens: Sensitivity, n_mc: int = 10**6, seed: int = 2024
) -> tuple[float, float]:
    """Monte-Carlo average of the conditional closed-form bounds over fresh X draws."""
    rng = np.random.default_rng(seed)
    sigma = build_sigma(cfg)
    chol = np.linalg.cholesky(sigma)
    z = rng.standard_normal((n_mc, cfg.p_x + cfg.p_u))
    x = (z @ chol.T)[:, : cfg.p_x]
    mean, var = oracle_outcome_moments(x, float(tau), cfg)
    zq = ndtri(sens.gamma)
    pdf_z = np.exp(-0.5 * zq * zq) / _SQRT_2PI
    shift = sens.tail_prefactor * np.sqrt(var) * pdf_z / sens.tail_mass
    return float(np.mean(mean - shift)), float(np.mean(mean + shift))


def calibrate_gamma(
    cfg: SimConfig,
    p_gamma: float = 0.99,
    n_cal: int = 10_000,
    seed: int = 0,
    trim_fraction: float = 0.10,
    at_tau: float | None = None,
) -> float:
    """Smallest confounding cap containing a share ``p_gamma`` of true density ratios.

    Draws a calibration sample where U is observed (trimmed like the analysis
    data when ``trim_fraction`` > 0), evaluates the ratio of the full
    treatment density to the X-only one at each row's own treatment, and
    returns the empirical ``p_gamma`` quantile of max(ratio, 1/ratio).

    ``at_tau`` switches every evaluation to that fixed treatment value. This
    is far more conservative: rows whose treatment distribution puts little
    mass near ``at_tau`` contribute extreme ratios, so the result can be
    orders of magnitude larger than the own-treatment calibration.
    """
    if not (0.0 < p_gamma < 1.0):
        raise ValidationError(f"p_gamma must lie in (0, 1), got {p_gamma}")
    if n_cal < 2:
        raise ValidationError("n_cal must be >= 2")
    sample = generate(
        SimConfig(
            p_x=cfg.p_x,
            p_u=cfg.p_u,
            rho_x=cfg.rho_x,
            rho_u=cfg.rho_u,
            lam=cfg.lam,
            beta_x=cfg.beta_x,
            beta_u=cfg.beta_u,
            gamma_x=cfg.gamma_x,
            gamma_u=cfg.gamma_u,
            zeta=cfg.zeta,
            sigma_eps_t=cfg.sigma_eps_t,
            sigma_eps_y=cfg.sigma_eps_y,
            n=n_cal,
            seed=seed,
        )
    )
    if trim_fraction > 0:
        sample = sample.subset(hat_outlier_keep_indices(sample.dataset, trim_fraction))
    x, u = sample.dataset.x, sample.u
    eval_at = sample.dataset.t if at_tau is None else np.full(sample.n, float(at_tau))

    full_mean = x @ cfg.beta_x + u @ cfg.beta_u - 0.5
    full_var = cfg.sigma_eps_t**2
    gps_model = OracleGpsModel(cfg)
    _, marg_mean, marg_var = gps_model.query_batch(x)
    marg_mean, marg_var = marg_mean[:, 0], marg_var[:, 0]

    log_full = -0.5 * (eval_at - full_mean) ** 2 / full_var - 0.5 * np.log(full_var)
    log_marg = -0.5 * (eval_at - marg_mean) ** 2 / marg_var - 0.5 * np.log(marg_var)
    log_ratio = log_full - log_marg
    return float(np.quantile(np.exp(np.abs(log_ratio)), p_gamma))
