import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtri

from apobounds import (
    BoundForm,
    BoundSide,
    Dataset,
    DiscreteConditional,
    EmptyNeighborhoodError,
    EstimatorKind,
    KernelSpec,
    NuisanceTable,
    ValidationError,
    apo_point,
    discrete_baseline_bound,
    discrete_bound_lp_oracle,
    discrete_sharp_bound,
    discrete_sharp_weights,
    dr_bounds_sample,
    sensitivity_from_gamma_big,
    sharp_bounds_sample,
)
from apobounds.estimators import sign_form_weights

EPA = KernelSpec("epanechnikov", 1.0)


def hand_dataset():
    # two points, unit propensity, zero regressions: the correction term is
    # everything
    data = Dataset(np.zeros((2, 1)), np.array([0.0, 1.0]), np.array([1.0, 3.0]))
    nuis = NuisanceTable(
        gps=np.ones(2),
        eta_at_obs=np.zeros(2),
        q_lo=np.full(2, -10.0),
        q_hi=np.full(2, -5.0),
        eta_at_tau=np.zeros(2),
    )
    return data, nuis


def random_problem(seed, n=40):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.normal(size=(n, 3)), rng.normal(size=n), rng.normal(size=n))
    eta_obs = rng.normal(size=n)
    spread = np.abs(rng.normal(size=n)) + 0.5
    center = rng.normal(size=n)
    nuis = NuisanceTable(
        gps=rng.uniform(0.2, 2.0, size=n),
        eta_at_obs=eta_obs,
        q_lo=center - spread,
        q_hi=center + spread,
        eta_at_tau=rng.normal(size=n),
    )
    return data, nuis


class TestApoPoint:
    def test_hand_value(self):
        data, nuis = hand_dataset()
        est = apo_point(data, nuis, EPA, 0.0, EstimatorKind.PLAIN_DR)
        # 0 + (1/2) * (0.75 * 1 * (1 - 0) + 0 * (3 - 0))
        assert est == pytest.approx(0.375, abs=1e-15)

    def test_no_kernel_mass_returns_regression_mean(self):
        data, nuis = hand_dataset()
        nuis = nuis.at_tau(np.array([0.7, 0.9]))
        with pytest.warns(UserWarning, match="no kernel mass"):
            est = apo_point(data, nuis, EPA, 25.0, EstimatorKind.PLAIN_DR)
        assert est == pytest.approx(0.8)

    def test_zero_residuals_give_regression_mean_exactly(self):
        data, nuis = random_problem(0)
        nuis = NuisanceTable(
            gps=nuis.gps,
            eta_at_obs=data.y,
            q_lo=nuis.q_lo,
            q_hi=nuis.q_hi,
            eta_at_tau=nuis.eta_at_tau,
        )
        est = apo_point(data, nuis, KernelSpec("gaussian", 1.0), 0.1)
        assert est == float(np.mean(nuis.eta_at_tau))

    def test_augmented_equals_plain(self):
        data, nuis = random_problem(1)
        a = apo_point(data, nuis, EPA, 0.2, EstimatorKind.PLAIN_DR)
        b = apo_point(data, nuis, EPA, 0.2, EstimatorKind.AUGMENTED)
        assert a == b

    def test_stabilized_kinds_error_without_mass(self):
        data, nuis = hand_dataset()
        for kind in (EstimatorKind.STABILIZED, EstimatorKind.STAB_AUGMENTED):
            with pytest.raises(EmptyNeighborhoodError):
                apo_point(data, nuis, EPA, 25.0, kind)

    def test_stabilized_is_weighted_mean(self):
        data, nuis = random_problem(2)
        est = apo_point(data, nuis, KernelSpec("gaussian", 0.7), 0.0, EstimatorKind.STABILIZED)
        w = np.exp(-0.5 * (data.t / 0.7) ** 2)
        w = w / nuis.gps
        assert est == pytest.approx(float(np.sum(w * data.y) / np.sum(w)), rel=1e-12)


class TestSharpBoundsSample:
    def test_gamma_one_sign_form_collapses_bitwise(self):
        data, nuis = random_problem(3)
        sens = sensitivity_from_gamma_big(1.0)
        point = apo_point(data, nuis, EPA, 0.3, EstimatorKind.PLAIN_DR)
        lo, hi = sharp_bounds_sample(data, nuis, EPA, 0.3, sens, BoundForm.SIGN)
        assert lo == point and hi == point

    def test_gamma_one_subset_form_collapses_to_eta_bar(self):
        data, nuis = random_problem(4)
        sens = sensitivity_from_gamma_big(1.0)
        lo, hi = sharp_bounds_sample(data, nuis, EPA, 0.3, sens, BoundForm.SUBSET)
        eta_bar = float(np.mean(nuis.eta_at_tau))
        assert lo == eta_bar and hi == eta_bar

    def test_hand_upper_bound(self):
        data, nuis = hand_dataset()  # q_hi below both outcomes
        sens = sensitivity_from_gamma_big(4.0)
        _, hi = sharp_bounds_sample(data, nuis, EPA, 0.0, sens, BoundForm.SIGN)
        # 0 + (1/2) * (0.75 * 1 * 4 + 0)
        assert hi == pytest.approx(1.5, abs=1e-15)

    def test_bounds_straddle_point_estimate(self):
        data, nuis = random_problem(5, n=200)
        sens = sensitivity_from_gamma_big(2.5)
        point = apo_point(data, nuis, KernelSpec("gaussian", 0.8), 0.0)
        lo, hi = sharp_bounds_sample(
            data, nuis, KernelSpec("gaussian", 0.8), 0.0, sens, BoundForm.SIGN
        )
        assert lo <= point <= hi

    def test_widening_in_gamma(self):
        data, nuis = random_problem(6, n=300)
        kernel = KernelSpec("gaussian", 0.8)
        widths = []
        for g in (1.0, 1.5, 2.5, 4.0):
            lo, hi = sharp_bounds_sample(
                data, nuis, kernel, 0.0, sensitivity_from_gamma_big(g), BoundForm.SIGN
            )
            widths.append(hi - lo)
        assert all(a <= b + 1e-12 for a, b in zip(widths, widths[1:]))

    def test_stabilized_sign_at_gamma_one_matches_stab_augmented(self):
        data, nuis = random_problem(7)
        sens = sensitivity_from_gamma_big(1.0)
        kernel = KernelSpec("gaussian", 0.9)
        lo, hi = sharp_bounds_sample(
            data, nuis, kernel, 0.1, sens, BoundForm.SIGN, stabilized=True
        )
        point = apo_point(data, nuis, kernel, 0.1, EstimatorKind.STAB_AUGMENTED)
        assert lo == point and hi == point

    def test_weight_range_property(self):
        data, nuis = random_problem(8)
        for g in (1.0, 2.0, 7.5):
            sens = sensitivity_from_gamma_big(g)
            w_lo, w_hi = sign_form_weights(data.y, nuis.q_lo, nuis.q_hi, sens)
            for w in (w_lo, w_hi):
                assert np.all(w >= 1.0 / g - 1e-15)
                assert np.all(w <= g + 1e-15)
                assert set(np.round(w, 12)) <= {round(1.0 / g, 12), round(g, 12)}

    def test_boundary_outcome_gets_interior_weight(self):
        y = np.array([0.0, 1.0, 2.0])
        q = np.ones(3)
        sens = sensitivity_from_gamma_big(3.0)
        w_lo, w_hi = sign_form_weights(y, q, q, sens)
        assert w_hi[1] == pytest.approx(1.0 / 3.0)  # y == q_hi: not in the upper tail
        assert w_lo[1] == pytest.approx(1.0 / 3.0)  # y == q_lo: not in the lower tail
        assert w_hi[2] == 3.0 and w_lo[0] == 3.0

    def test_subset_form_agrees_with_sign_form_in_population_direction(self):
        # both forms estimate the same object; on a well-behaved sample they
        # should land close
        data, nuis = random_problem(9, n=2000)
        sens = sensitivity_from_gamma_big(2.0)
        kernel = KernelSpec("gaussian", 0.8)
        sign_pair = sharp_bounds_sample(data, nuis, kernel, 0.0, sens, BoundForm.SIGN)
        subset_pair = sharp_bounds_sample(data, nuis, kernel, 0.0, sens, BoundForm.SUBSET)
        assert sign_pair[0] == pytest.approx(subset_pair[0], abs=0.35)
        assert sign_pair[1] == pytest.approx(subset_pair[1], abs=0.35)


class TestDrBounds:
    def test_zero_residuals_reduce_to_plugin(self):
        data, nuis = random_problem(10)
        sens = sensitivity_from_gamma_big(2.0)
        w_lo, w_hi = sign_form_weights(data.y, nuis.q_lo, nuis.q_hi, sens)
        theta_minus_obs = data.y * w_lo
        theta_plus_obs = data.y * w_hi
        theta_minus_tau = np.full(data.n, -1.23)
        theta_plus_tau = np.full(data.n, 4.56)
        lo, hi = dr_bounds_sample(
            data,
            KernelSpec("gaussian", 0.8),
            0.0,
            sens,
            nuis.gps,
            nuis.q_lo,
            nuis.q_hi,
            theta_minus_obs,
            theta_plus_obs,
            theta_minus_tau,
            theta_plus_tau,
        )
        assert lo == pytest.approx(-1.23, abs=1e-12)
        assert hi == pytest.approx(4.56, abs=1e-12)

    def test_gamma_one_reduces_to_augmented_form(self):
        data, nuis = random_problem(11)
        sens = sensitivity_from_gamma_big(1.0)
        rng = np.random.default_rng(0)
        theta_obs = rng.normal(size=data.n)
        theta_tau = rng.normal(size=data.n)
        lo, hi = dr_bounds_sample(
            data,
            EPA,
            0.1,
            sens,
            nuis.gps,
            nuis.q_lo,
            nuis.q_hi,
            theta_obs,
            theta_obs,
            theta_tau,
            theta_tau,
        )
        kw = np.where(np.abs(data.t - 0.1) <= 1, 0.75 * (1 - (data.t - 0.1) ** 2), 0.0)
        expected = float(np.mean(theta_tau)) + float(
            np.mean(kw / nuis.gps * (data.y - theta_obs))
        )
        assert lo == pytest.approx(expected, abs=1e-14)
        assert hi == pytest.approx(expected, abs=1e-14)

    def test_hand_two_point_value(self):
        data = Dataset(np.zeros((2, 1)), np.array([0.0, 1.0]), np.array([1.0, 3.0]))
        sens = sensitivity_from_gamma_big(2.0)
        gps = np.array([0.5, 1.0])
        q_lo = np.array([2.0, 4.0])  # both outcomes below: lower weight Gamma
        q_hi = np.array([0.0, 1.0])  # both outcomes above: upper weight Gamma
        theta_minus_obs = np.array([0.1, 0.2])
        theta_plus_obs = np.array([0.3, 0.4])
        theta_minus_tau = np.array([1.0, 1.0])
        theta_plus_tau = np.array([2.0, 2.0])
        lo, hi = dr_bounds_sample(
            data, EPA, 0.0, sens, gps, q_lo, q_hi,
            theta_minus_obs, theta_plus_obs, theta_minus_tau, theta_plus_tau,
        )
        # kernel weights: K(0)/0.5 = 1.5 for the first point, 0 for the second
        assert hi == pytest.approx(2.0 + 0.5 * 1.5 * (1.0 * 2.0 - 0.3), abs=1e-14)
        assert lo == pytest.approx(1.0 + 0.5 * 1.5 * (1.0 * 2.0 - 0.1), abs=1e-14)

    def test_dimension_mismatch(self):
        data, nuis = random_problem(12)
        sens = sensitivity_from_gamma_big(2.0)
        with pytest.raises(ValidationError):
            dr_bounds_sample(
                data, EPA, 0.0, sens, nuis.gps[:-1], nuis.q_lo, nuis.q_hi,
                nuis.eta_at_obs, nuis.eta_at_obs, nuis.eta_at_obs, nuis.eta_at_obs,
            )

    def test_end_to_end_with_fitted_tail_regressions(self):
        # the documented workflow: regress the reweighted outcomes on (x, t)
        # with a conditional-mean model, then plug the predictions in
        from apobounds import Dataset as DS
        from apobounds.density import LinearGaussianModel, model_mean_batch

        rng = np.random.default_rng(3)
        n = 600
        x = rng.normal(size=(n, 2))
        t = 0.5 * x[:, 0] + rng.normal(0, 0.8, n)
        y = t + 0.4 * x[:, 1] + rng.normal(0, 0.6, n)
        data = DS(x, t, y)
        sens = sensitivity_from_gamma_big(2.0)
        center = y.mean() + np.zeros(n)
        q_lo, q_hi = center - 0.8, center + 0.8
        w_lo, w_hi = sign_form_weights(y, q_lo, q_hi, sens)
        reg_minus = LinearGaussianModel.fit_outcome(DS(x, t, y * w_lo))
        reg_plus = LinearGaussianModel.fit_outcome(DS(x, t, y * w_hi))
        tau = 0.0
        gps = np.full(n, 0.5)
        lo, hi = dr_bounds_sample(
            data,
            KernelSpec("gaussian", 0.6),
            tau,
            sens,
            gps,
            q_lo,
            q_hi,
            model_mean_batch(reg_minus, x, t),
            model_mean_batch(reg_plus, x, t),
            model_mean_batch(reg_minus, x, np.full(n, tau)),
            model_mean_batch(reg_plus, x, np.full(n, tau)),
        )
        assert np.isfinite(lo) and np.isfinite(hi)
        assert lo < hi


def random_discrete(rng, max_atoms=10):
    m = int(rng.integers(1, max_atoms + 1))
    values = rng.normal(0.0, 2.0, size=m)
    probs = rng.dirichlet(np.ones(m))
    return DiscreteConditional(values, probs)


class TestDiscreteSharpBound:
    def test_gamma_one_gives_mean(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            dist = random_discrete(rng)
            sens = sensitivity_from_gamma_big(1.0)
            for side in BoundSide:
                assert discrete_sharp_bound(dist, sens, side) == pytest.approx(
                    dist.mean, abs=1e-12
                )

    def test_reference_two_atom_value(self):
        dist = DiscreteConditional(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
        sens = sensitivity_from_gamma_big(5.21)
        tail = 1.0 / 6.21  # 1 - gamma
        expected = tail * 5.21 + (0.5 - tail) / 5.21
        assert expected == pytest.approx(0.9040, abs=2e-4)
        got = discrete_sharp_bound(dist, sens, BoundSide.UPPER)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_large_gamma_limit(self):
        dist = DiscreteConditional(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
        sens = sensitivity_from_gamma_big(1e6)
        assert discrete_sharp_bound(dist, sens, BoundSide.UPPER) == pytest.approx(
            1.0, abs=1e-3
        )

    def test_single_atom(self):
        dist = DiscreteConditional(np.array([2.5]), np.array([1.0]))
        sens = sensitivity_from_gamma_big(7.0)
        for side in BoundSide:
            assert discrete_sharp_bound(dist, sens, side) == pytest.approx(2.5, abs=1e-12)

    def test_optimal_weights_satisfy_unit_mass(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            dist = random_discrete(rng)
            sens = sensitivity_from_gamma_big(float(rng.uniform(1.0, 20.0)))
            for side in BoundSide:
                w = discrete_sharp_weights(dist, sens, side)
                assert abs(float(w @ dist.probs) - 1.0) <= 1e-12
                assert np.all(w >= 1.0 / sens.gamma_big - 1e-12)
                assert np.all(w <= sens.gamma_big + 1e-12)

    def test_matches_lp_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            dist = random_discrete(rng)
            sens = sensitivity_from_gamma_big(float(rng.uniform(1.0, 20.0)))
            for side in BoundSide:
                closed = discrete_sharp_bound(dist, sens, side)
                oracle = discrete_bound_lp_oracle(dist, sens, side)
                assert closed == pytest.approx(oracle, abs=1e-9)

    def test_large_support_oracle_path(self):
        rng = np.random.default_rng(3)
        values = rng.normal(size=30)
        dist = DiscreteConditional(values, rng.dirichlet(np.ones(30)))
        sens = sensitivity_from_gamma_big(3.0)
        for side in BoundSide:
            closed = discrete_sharp_bound(dist, sens, side)
            oracle = discrete_bound_lp_oracle(dist, sens, side)
            assert closed == pytest.approx(oracle, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(1.0, 10.0), st.floats(1.0, 3.0))
    def test_nesting_in_gamma(self, seed, g1, factor):
        dist = random_discrete(np.random.default_rng(seed))
        g2 = g1 * factor
        s1, s2 = sensitivity_from_gamma_big(g1), sensitivity_from_gamma_big(g2)
        lo1 = discrete_sharp_bound(dist, s1, BoundSide.LOWER)
        hi1 = discrete_sharp_bound(dist, s1, BoundSide.UPPER)
        lo2 = discrete_sharp_bound(dist, s2, BoundSide.LOWER)
        hi2 = discrete_sharp_bound(dist, s2, BoundSide.UPPER)
        assert lo2 <= lo1 + 1e-12 and hi1 <= hi2 + 1e-12


class TestDiscreteBaselineBound:
    def test_requires_gamma_above_one(self):
        dist = DiscreteConditional(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
        with pytest.raises(ValidationError):
            discrete_baseline_bound(dist, 0.5, sensitivity_from_gamma_big(1.0), BoundSide.UPPER)

    def test_upper_correction_nonnegative(self):
        dist = DiscreteConditional(np.array([-1.0, 2.0]), np.array([0.7, 0.3]))
        eta = dist.mean
        sens = sensitivity_from_gamma_big(2.0)
        hi = discrete_baseline_bound(dist, eta, sens, BoundSide.UPPER)
        lo = discrete_baseline_bound(dist, eta, sens, BoundSide.LOWER)
        assert hi >= eta and lo <= eta

    def test_matches_exhaustive_kappa_grid(self):
        # 3 atoms, kappa on a 51-point grid per atom: quasi-linearity means the
        # threshold scan must attain the grid optimum
        dist = DiscreteConditional(np.array([-1.0, 0.5, 2.0]), np.array([0.3, 0.45, 0.25]))
        eta = dist.mean
        sens = sensitivity_from_gamma_big(3.0)
        c = 1.0 / (3.0**2 - 1.0)
        grid = np.linspace(0.0, 1.0, 51)
        kappas = np.stack(np.meshgrid(grid, grid, grid), axis=-1).reshape(-1, 3)
        num = kappas @ (dist.probs * (dist.values - eta))
        den = c + kappas @ dist.probs
        ratios = num / den
        assert discrete_baseline_bound(dist, eta, sens, BoundSide.UPPER) == pytest.approx(
            eta + ratios.max(), abs=1e-6
        )
        assert discrete_baseline_bound(dist, eta, sens, BoundSide.LOWER) == pytest.approx(
            eta + ratios.min(), abs=1e-6
        )

    def test_nesting_against_sharp_bounds(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            dist = random_discrete(rng)
            sens = sensitivity_from_gamma_big(float(rng.uniform(1.001, 20.0)))
            eta = dist.mean
            sharp_lo = discrete_sharp_bound(dist, sens, BoundSide.LOWER)
            sharp_hi = discrete_sharp_bound(dist, sens, BoundSide.UPPER)
            base_lo = discrete_baseline_bound(dist, eta, sens, BoundSide.LOWER)
            base_hi = discrete_baseline_bound(dist, eta, sens, BoundSide.UPPER)
            assert base_lo <= sharp_lo + 1e-9
            assert sharp_hi <= base_hi + 1e-9


def test_cvar_equivalence_on_fine_discretization():
    # the tail-mean form and the two-point reweighting form agree on a fine
    # grid approximation of a continuous law
    grid = np.linspace(-8.0, 8.0, 20001)
    pdf = np.exp(-0.5 * grid**2)
    probs = pdf / pdf.sum()
    sens = sensitivity_from_gamma_big(2.0)
    eta = float(grid @ probs)
    q_hi = float(ndtri(sens.gamma))
    upper_tail = grid > q_hi
    tail_mean = float(((grid - eta) * probs)[upper_tail].sum()) / float(probs[upper_tail].sum())
    lhs = sens.tail_prefactor * tail_mean
    weights = np.where(grid > q_hi, sens.gamma_big, 1.0 / sens.gamma_big)
    rhs = float(((grid - eta) * weights * probs).sum())
    assert lhs == pytest.approx(rhs, abs=1e-3)
    # and the discrete solver's correction matches both
    dist = DiscreteConditional(grid, probs)
    solver = discrete_sharp_bound(dist, sens, BoundSide.UPPER) - eta
    assert solver == pytest.approx(lhs, abs=1e-3)
