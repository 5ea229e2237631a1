import itertools

import numpy as np
import pytest
from scipy.special import ndtr

from apobounds import (
    BaselineConfig,
    BoundSide,
    ConditionalGaussianMixture,
    Dataset,
    DiscreteConditional,
    ValidationError,
    baseline_apo_bounds,
    baseline_capo_bounds,
    discrete_baseline_bound,
    sensitivity_from_gamma_big,
)
from apobounds.baseline import _ratio_extrema, baseline_capo_bounds_rows
from apobounds.density import mixture_mean


class FixedMixtureModel:
    """Density model returning the same mixture at every query point."""

    def __init__(self, mixture: ConditionalGaussianMixture):
        self.mixture = mixture

    def query(self, x, t=None):
        return self.mixture

    def query_batch(self, x, t=None):
        n = np.atleast_2d(x).shape[0]
        m = self.mixture
        return (
            np.tile(m.weights, (n, 1)),
            np.tile(m.means, (n, 1)),
            np.tile(m.variances, (n, 1)),
        )

    def refit(self, data, epochs_cap):
        return self


STANDARD = ConditionalGaussianMixture(np.array([1.0]), np.array([0.7]), np.array([1.0]))


class TestRatioExtrema:
    def test_constant_draws_give_zero_correction(self):
        lo, hi = _ratio_extrema(np.full(100, 3.3), 3.3, 2.0)
        assert lo == 0.0 and hi == 0.0

    def test_signs(self):
        rng = np.random.default_rng(0)
        draws = rng.normal(size=500)
        lo, hi = _ratio_extrema(draws, float(draws.mean()), 2.0)
        assert lo <= 0.0 <= hi

    def test_threshold_scan_matches_exhaustive_grid(self):
        # kappa restricted to a 5-level grid per draw: quasi-linearity means
        # the threshold scan must reach the grid optimum
        rng = np.random.default_rng(1)
        draws = rng.normal(size=6)
        eta = float(draws.mean())
        gamma = 3.0
        c = 1.0 / (gamma**2 - 1.0)
        best_hi, best_lo = -np.inf, np.inf
        for kappa in itertools.product(np.linspace(0, 1, 5), repeat=6):
            k = np.asarray(kappa)
            num = float(np.mean(k * (draws - eta)))
            ratio = num / (c + float(np.mean(k)))
            best_hi = max(best_hi, ratio)
            best_lo = min(best_lo, ratio)
        lo, hi = _ratio_extrema(draws, eta, gamma)
        assert hi == pytest.approx(best_hi, abs=1e-12)
        assert lo == pytest.approx(best_lo, abs=1e-12)


class TestCapoBounds:
    def test_gamma_guard(self):
        model = FixedMixtureModel(STANDARD)
        with pytest.raises(ValidationError):
            baseline_capo_bounds(
                model, np.zeros(2), 0.0, sensitivity_from_gamma_big(1.0), BaselineConfig()
            )

    def test_gamma_near_one_collapses_to_regression_mean(self):
        model = FixedMixtureModel(STANDARD)
        sens = sensitivity_from_gamma_big(1.0 + 1e-9)
        lo, hi = baseline_capo_bounds(model, np.zeros(2), 0.0, sens, BaselineConfig())
        eta = mixture_mean(STANDARD)
        spread = np.sqrt(STANDARD.variances.max())
        assert abs(lo - eta) <= 1e-6 * spread
        assert abs(hi - eta) <= 1e-6 * spread

    def test_matches_discrete_solver_on_two_atom_mixture(self):
        # near-degenerate two-component mixture approximates a two-atom law;
        # the MC grid search should match the exact discrete optimum within
        # three standard errors of the MC estimator
        atoms = np.array([-1.0, 2.0])
        probs = np.array([0.6, 0.4])
        mixture = ConditionalGaussianMixture(probs, atoms, np.full(2, 1e-10))
        model = FixedMixtureModel(mixture)
        sens = sensitivity_from_gamma_big(3.0)
        dist = DiscreteConditional(atoms, probs)
        eta = dist.mean
        exact_hi = discrete_baseline_bound(dist, eta, sens, BoundSide.UPPER)
        exact_lo = discrete_baseline_bound(dist, eta, sens, BoundSide.LOWER)
        cfg = BaselineConfig(mc_samples=500)
        los, his = [], []
        for seed in range(24):
            lo, hi = baseline_capo_bounds(
                model, np.full(2, float(seed)), 0.0, sens, BaselineConfig(mc_samples=500, seed=seed)
            )
            los.append(lo)
            his.append(hi)
        for observed, exact in ((np.array(los), exact_lo), (np.array(his), exact_hi)):
            se = observed.std(ddof=1) / np.sqrt(observed.size)
            assert abs(observed.mean() - exact) <= 3 * se + 1e-9

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            BaselineConfig(mc_samples=1)


class TestApoBounds:
    def test_single_row_equals_capo(self):
        model = FixedMixtureModel(STANDARD)
        sens = sensitivity_from_gamma_big(2.0)
        cfg = BaselineConfig(mc_samples=300, seed=4)
        x = np.array([[0.3, -0.2]])
        data = Dataset(np.vstack([x, x]), np.zeros(2), np.zeros(2)).subset([0, 1])
        single = baseline_capo_bounds(model, x[0], 0.5, sens, cfg)
        row_lo, row_hi = baseline_capo_bounds_rows(model, x, 0.5, sens, cfg)
        assert row_lo[0] == pytest.approx(single[0], abs=1e-12)
        assert row_hi[0] == pytest.approx(single[1], abs=1e-12)

    def test_duplicated_rows_identical_to_single_copy(self):
        model = FixedMixtureModel(STANDARD)
        sens = sensitivity_from_gamma_big(2.0)
        cfg = BaselineConfig(mc_samples=200, seed=9)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(7, 2))
        base = Dataset(x, np.zeros(7), np.zeros(7))
        doubled = Dataset(np.vstack([x, x]), np.zeros(14), np.zeros(14))
        a = baseline_apo_bounds(model, base, 0.2, sens, cfg)
        b = baseline_apo_bounds(model, doubled, 0.2, sens, cfg)
        assert a[0] == pytest.approx(b[0], abs=1e-12)
        assert a[1] == pytest.approx(b[1], abs=1e-12)

    def test_interval_nests_sharp_bounds_on_random_mixtures(self):
        # shared conditional law: the grid-search interval must contain the
        # tail-mean sharp interval up to MC noise on nearly every instance
        rng = np.random.default_rng(7)
        sens = sensitivity_from_gamma_big(2.5)
        gamma = sens.gamma
        hits = 0
        cases = 40
        for case in range(cases):
            k = int(rng.integers(1, 4))
            mixture = ConditionalGaussianMixture(
                rng.dirichlet(np.ones(k)),
                rng.normal(0, 1.5, k),
                rng.uniform(0.2, 2.0, k),
            )
            model = FixedMixtureModel(mixture)
            lo, hi = baseline_capo_bounds(
                model,
                rng.normal(size=2),
                0.0,
                sens,
                BaselineConfig(mc_samples=800, seed=100 + case),
            )
            sharp_lo, sharp_hi = _sharp_mixture_bounds(mixture, sens)
            tol = 3.0 * np.sqrt(mixture.variances.max() / 800)
            if lo <= sharp_lo + tol and sharp_hi <= hi + tol:
                hits += 1
        assert hits >= 0.95 * cases


def _sharp_mixture_bounds(mixture, sens):
    """Tail-mean sharp bounds for a Gaussian mixture, computed analytically."""
    from apobounds import QuantileRequest, conditional_quantile

    eta = mixture_mean(mixture)
    out = []
    for side, level in (("lo", 1.0 - sens.gamma), ("hi", sens.gamma)):
        q = conditional_quantile(QuantileRequest(level, mixture))
        sd = np.sqrt(mixture.variances)
        z = (q - mixture.means) / sd
        pdf = np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
        upper_partial = float(
            np.sum(mixture.weights * ((mixture.means - eta) * (1.0 - ndtr(z)) + sd * pdf))
        )
        if side == "hi":
            corr = sens.tail_prefactor * upper_partial / sens.tail_mass
            out.append(eta + corr)
        else:
            # lower tail: E[(Y - eta) 1{Y <= q}] = -E[(Y - eta) 1{Y > q}]
            lower_partial = -upper_partial
            corr = sens.tail_prefactor * lower_partial / sens.tail_mass
            out.append(eta + corr)
    return out[0], out[1]
