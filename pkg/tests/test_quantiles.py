import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drnet.errors import ValidationError
from drnet.inference import Band, build_bands
from drnet.quantiles import (AverageEffect, average_effect, invert_band,
                             left_inverse, qe_band, step_integral)


def cdf_band(grid, lower, upper, center=None, region=None):
    grid = np.asarray(grid, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    center = 0.5 * (lower + upper) if center is None else np.asarray(center)
    region = (float(grid[0]), float(grid[-1]) + 1.0) if region is None \
        else region
    return Band(grid_values=grid, region=region, center=center, lower=lower,
                upper=upper, se=np.zeros_like(grid), level=0.95,
                critical_value=1.0, kind="uniform",
                cluster_mode="independent", shaped=True)


def random_monotone_triple(rng, size):
    """Three nondecreasing [0,1] paths with L <= G <= U pointwise."""
    paths = np.sort(np.sort(rng.uniform(0, 1, (3, size)), axis=1), axis=0)
    return paths[0], paths[1], paths[2]


class TestLeftInverse:
    def test_single_step_cdf(self):
        grid = np.array([-1.0, 0.5, 2.0])
        F = np.array([0.0, 1.0, 1.0])
        for tau in (0.05, 0.5, 0.999):
            assert left_inverse(grid, F, tau, y_sup=2.0) == 0.5

    def test_cap_at_region_sup(self):
        grid = np.array([0.0, 1.0])
        F = np.array([0.2, 0.6])
        assert left_inverse(grid, F, 0.7, y_sup=9.0) == 9.0

    def test_hand_enumerated_discrete_case(self):
        grid = np.array([1.0, 2.0, 3.0])
        F = np.array([0.2, 0.5, 1.0])
        assert left_inverse(grid, F, 0.5, y_sup=3.0) == 2.0
        assert left_inverse(grid, F, 0.51, y_sup=3.0) == 3.0

    def test_monotone_in_tau_and_galois(self):
        rng = np.random.default_rng(0)
        grid = np.sort(rng.uniform(-2, 2, 15))
        F = np.sort(rng.uniform(0, 1, 15))
        taus = np.linspace(0.01, 0.99, 37)
        q = left_inverse(grid, F, taus, y_sup=3.0)
        assert (np.diff(q) >= 0).all()
        for tau, qi in zip(taus, q):
            if qi < 3.0:
                pos = np.searchsorted(grid, qi)
                assert F[pos] >= tau

    def test_rejects_decreasing_series(self):
        with pytest.raises(ValidationError):
            left_inverse(np.array([0.0, 1.0]), np.array([0.5, 0.2]), 0.3,
                         y_sup=1.0)


class TestInvertBand:
    def test_degenerate_band_inverts_to_point(self):
        grid = np.array([0.0, 1.0, 2.0, 3.0])
        F = np.array([0.1, 0.4, 0.7, 1.0])
        band = cdf_band(grid, F, F, center=F)
        qb = invert_band(band, np.array([0.2, 0.5, 0.8]))
        np.testing.assert_array_equal(qb.lower, qb.upper)
        np.testing.assert_array_equal(qb.lower, qb.center)

    def test_widening_upper_never_raises_lower_quantile(self):
        grid = np.linspace(0, 1, 11)
        L = np.linspace(0.05, 0.8, 11)
        U = np.linspace(0.15, 0.95, 11)
        taus = np.linspace(0.1, 0.9, 9)
        qb1 = invert_band(cdf_band(grid, L, U), taus)
        U2 = np.clip(U + 0.04, 0, 1)
        qb2 = invert_band(cdf_band(grid, L, U2), taus)
        assert (qb2.lower <= qb1.lower + 1e-12).all()

    def test_rejects_unshaped_endpoints(self):
        grid = np.array([0.0, 1.0])
        band = cdf_band(grid, np.array([0.4, 0.2]), np.array([0.5, 0.6]))
        with pytest.raises(ValidationError, match="shape"):
            invert_band(band, np.array([0.5]))

    @pytest.mark.parametrize("seed", range(4))
    def test_coverage_preservation_randomized(self, seed):
        # Deterministic path-by-path property: L <= G <= U implies
        # U^-1 <= G^-1 <= L^-1 at every tau
        rng = np.random.default_rng(seed)
        for _ in range(50):
            size = int(rng.integers(3, 25))
            L, G, U = random_monotone_triple(rng, size)
            grid = np.sort(rng.uniform(-3, 3, size))
            y_sup = float(grid[-1] + rng.uniform(0.1, 1.0))
            taus = rng.uniform(0.01, 0.99, 11)
            band = cdf_band(grid, L, U, region=(grid[0], y_sup))
            qb = invert_band(band, taus)
            g_inv = left_inverse(grid, G, taus, y_sup=y_sup)
            assert (qb.lower <= g_inv + 1e-12).all()
            assert (g_inv <= qb.upper + 1e-12).all()


class TestQeBand:
    def test_self_difference_symmetric_around_zero(self):
        grid = np.linspace(0, 1, 8)
        L = np.linspace(0.1, 0.7, 8)
        U = np.linspace(0.2, 0.9, 8)
        taus = np.array([0.3, 0.5, 0.7])
        qb = invert_band(cdf_band(grid, L, U), taus)
        diff = qe_band(qb, qb)
        np.testing.assert_array_equal(diff.center, 0.0)
        np.testing.assert_array_equal(diff.lower, qb.lower - qb.upper)
        np.testing.assert_array_equal(diff.upper, qb.upper - qb.lower)
        assert (diff.lower <= 0).all()
        np.testing.assert_array_equal(diff.lower, -diff.upper)

    def test_zero_width_inputs(self):
        grid = np.linspace(0, 1, 6)
        F0 = np.linspace(0.2, 0.8, 6)
        F1 = np.linspace(0.1, 0.95, 6)
        taus = np.array([0.4, 0.6])
        q0 = invert_band(cdf_band(grid, F0, F0, center=F0), taus)
        q1 = invert_band(cdf_band(grid, F1, F1, center=F1), taus)
        diff = qe_band(q1, q0)
        np.testing.assert_array_equal(diff.lower, diff.upper)
        np.testing.assert_array_equal(diff.center, q1.center - q0.center)

    def test_mismatched_grids_rejected(self):
        grid = np.linspace(0, 1, 6)
        F = np.linspace(0.2, 0.8, 6)
        q1 = invert_band(cdf_band(grid, F, F), np.array([0.4]))
        q0 = invert_band(cdf_band(grid, F, F), np.array([0.5]))
        with pytest.raises(ValidationError):
            qe_band(q1, q0)

    @pytest.mark.parametrize("seed", range(4))
    def test_joint_coverage_randomized(self, seed):
        rng = np.random.default_rng(100 + seed)
        for _ in range(50):
            size = int(rng.integers(3, 20))
            grid = np.sort(rng.uniform(-2, 2, size))
            y_sup = float(grid[-1] + 0.5)
            taus = rng.uniform(0.02, 0.98, 9)
            L0, G0, U0 = random_monotone_triple(rng, size)
            L1, G1, U1 = random_monotone_triple(rng, size)
            q0 = invert_band(cdf_band(grid, L0, U0,
                                      region=(grid[0], y_sup)), taus)
            q1 = invert_band(cdf_band(grid, L1, U1,
                                      region=(grid[0], y_sup)), taus)
            delta_band = qe_band(q1, q0)
            truth = left_inverse(grid, G1, taus, y_sup=y_sup) \
                - left_inverse(grid, G0, taus, y_sup=y_sup)
            assert (delta_band.lower <= truth + 1e-12).all()
            assert (truth <= delta_band.upper + 1e-12).all()


class TestAverageEffect:
    def grid_phi(self, G, n, k=2):
        return np.zeros((G, n, k))

    def test_point_mass_mean(self):
        # F jumps to 1 at a > 0: mu = a exactly
        grid = np.array([0.0, 0.7, 1.5, 2.0])
        f = np.array([0.0, 0.0, 1.0, 1.0])
        eff = average_effect(grid, (0.0, 2.5), f, f,
                             self.grid_phi(4, 10), "independent")
        assert eff.mu0 == pytest.approx(1.5, abs=1e-12)
        assert eff.delta == 0.0

    def test_identical_arms_zero_delta_and_zero_draws(self):
        from drnet.inference import MultiplierScheme
        from conftest import complete_panel
        rng = np.random.default_rng(1)
        panel = complete_panel(3, 3, rng.normal(size=9),
                               rng.normal(size=(9, 1)))
        grid = np.array([-1.0, 0.0, 1.0])
        f = np.array([0.2, 0.5, 0.9])
        phi = rng.normal(size=(3, 9, 2))
        phi[:, :, 1] = phi[:, :, 0]
        scheme = MultiplierScheme(panel, 7, "independent", 16)
        eff = average_effect(grid, (-1.5, 1.5), f, f, phi, "independent",
                             scheme=scheme)
        assert eff.delta == 0.0
        assert eff.se == 0.0

    def test_step_integral_telescoping_identity(self):
        # for a piecewise-constant CDF with full mass on the grid, mu
        # equals sum y * jump
        grid = np.array([-1.0, 0.5, 1.25, 3.0])
        f = np.array([0.1, 0.35, 0.75, 1.0])
        eff = average_effect(grid, (-2.0, 3.5), f, f,
                             self.grid_phi(4, 5), "independent")
        jumps = np.diff(np.concatenate([[0.0], f]))
        np.testing.assert_allclose(eff.mu0, float(grid @ jumps), atol=1e-12)
        assert eff.support_incomplete == ()

    def test_support_incomplete_flagged(self):
        grid = np.array([0.0, 1.0])
        f = np.array([0.1, 0.8])
        eff = average_effect(grid, (0.0, 2.0), f, f,
                             self.grid_phi(2, 5), "independent")
        assert eff.support_incomplete == (0, 1)

    def test_region_must_bracket_zero(self):
        grid = np.array([1.0, 2.0])
        f = np.array([0.5, 1.0])
        with pytest.raises(ValidationError, match="bracket 0"):
            average_effect(grid, (0.5, 3.0), f, f, self.grid_phi(2, 4),
                           "independent")

    def test_se_matches_direct_quadrature(self):
        rng = np.random.default_rng(5)
        grid = np.array([0.0, 0.4, 1.1])
        f0 = np.array([0.2, 0.5, 1.0])
        f1 = np.array([0.1, 0.3, 1.0])
        phi = rng.normal(size=(3, 7, 2)) * 0.05
        eff = average_effect(grid, (0.0, 1.6), f0, f1, phi, "independent")
        widths = np.array([0.4, 0.7, 0.5])
        phid = -(phi[:, :, 1] - phi[:, :, 0]).T @ widths
        np.testing.assert_allclose(eff.se, np.sqrt((phid ** 2).sum()) / 7,
                                   atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_left_inverse_galois_property(seed):
    rng = np.random.default_rng(seed)
    size = int(rng.integers(2, 30))
    grid = np.sort(rng.uniform(-5, 5, size))
    F = np.sort(rng.uniform(0, 1, size))
    tau = float(rng.uniform(0.01, 0.99))
    q = left_inverse(grid, F, tau, y_sup=grid[-1] + 1.0)
    if q <= grid[-1]:
        assert F[np.searchsorted(grid, q)] >= tau
