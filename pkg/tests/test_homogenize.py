import numpy as np
import pytest

from homogenization.homogenize import (constant_c, constant_c_quadrature, diffusivity_report, estimate_a_corrector_form,
                                       estimate_a_ST, estimate_cbar, pair_covariance, psi_decay, realization_seed,
                                       stationary_covariance, stationary_covariance_grid)
from homogenization.profiles import (AffineProfile, ConstantProfile, GaussianProfile, Homogenized,
                                     gaussian_test_function, make_profile)
from she_core.errors import ValidationError
from she_core.estimates import Estimate
from she_core.fk_engine import DEFAULT_DT, calibrate_lambda, sample_ensemble
from she_core.rng import as_stage


class TestConstantC:
    def test_closed_form_in_three_dimensions(self):
        assert constant_c(3) == pytest.approx(1.0 / (4.0 * np.pi))

    def test_quadrature_agrees(self):
        assert constant_c_quadrature(3) == pytest.approx(constant_c(3), rel=1e-5)
        assert constant_c_quadrature(4) == pytest.approx(constant_c(4), rel=1e-5)

    def test_low_dimension_rejected(self):
        with pytest.raises(ValidationError):
            constant_c(2)
        with pytest.raises(ValidationError):
            constant_c_quadrature(2)


class TestProfiles:
    def test_gaussian_evolution_matches_quadrature(self):
        profile = GaussianProfile(1.0)
        points = np.array([[0.0, 0.0, 0.0], [0.5, -0.5, 1.0]])
        closed = Homogenized(profile, 0.6)
        quadrature = Homogenized(GaussianProfile(1.0, cutoff=12.0), 0.6)
        assert np.allclose(closed.value(0.5, points), quadrature.value(0.5, points), rtol=1e-6)
        assert np.allclose(closed.gradient(0.5, points), quadrature.gradient(0.5, points), atol=1e-6)

    def test_gaussian_gradient(self):
        profile = GaussianProfile(0.7)
        x = np.array([0.3, -0.2, 0.1])
        h = 1e-6
        numeric = [(profile.value(x + h * e) - profile.value(x - h * e)) / (2 * h) for e in np.eye(3)]
        assert np.allclose(profile.gradient(x), numeric, atol=1e-7)

    def test_test_function_cutoff(self):
        g = gaussian_test_function(0.25)
        assert g.cutoff == pytest.approx(1.0)
        assert g.value(np.array([1.01, 0.0, 0.0])) == 0.0
        assert g.evolved(1.0, 1.0) is None
        assert g.integral() == pytest.approx((2 * np.pi * 0.0625) ** 1.5)

    def test_constant_and_affine(self):
        constant = Homogenized(ConstantProfile(2.0), 0.9)
        x = np.zeros((4, 3))
        assert np.allclose(constant.value(1.0, x), 2.0)
        assert np.allclose(constant.gradient(1.0, x), 0.0)
        affine = AffineProfile(np.array([1.0, 0.0, -1.0]), 0.5)
        assert affine.value(np.array([1.0, 2.0, 3.0])) == pytest.approx(-1.5)
        assert np.allclose(Homogenized(affine, 1.3).gradient(2.0, x), [1.0, 0.0, -1.0])

    def test_make_profile(self):
        assert isinstance(make_profile('gaussian', sigma=0.5), GaussianProfile)
        assert make_profile('constant').is_constant
        with pytest.raises(ValidationError):
            make_profile('step')


class TestDiffusivityEstimates:
    def test_a_ST_without_potential(self, small_spec, streams):
        estimate = estimate_a_ST(small_spec, 0.0, 0.0, 4.0, 0.0, 1.0, 2000, streams)
        assert estimate.within(1.0, k=4.0)

    def test_a_ST_regularization_range(self, small_spec, streams):
        with pytest.raises(ValidationError):
            estimate_a_ST(small_spec, 0.0, 0.0, 4.0, 0.0, 0.1, 10, streams)
        with pytest.raises(ValidationError):
            estimate_a_ST(small_spec, 0.0, 0.0, 4.0, 0.0, 5.0, 10, streams)

    def test_corrector_form_without_potential(self, small_spec, streams):
        estimate = estimate_a_corrector_form(small_spec, 0.0, 0.0, 1.0, 1.0, 2, streams)
        assert estimate.value == 1.0
        with pytest.raises(ValidationError):
            estimate_a_corrector_form(small_spec, 0.0, 0.0, 1.0, 1.0, 1, streams)

    def test_cbar_without_potential(self, small_spec, streams):
        calibration = calibrate_lambda(0.0, small_spec, (4.0, 16.0), 10, streams)
        report = estimate_cbar(small_spec, 0.0, calibration, 1.0, 2, streams)
        assert report.calibration_route.value == 1.0
        assert report.grid_route.value == pytest.approx(1.0)
        assert report.z == 0.0

    def test_report_z_scores(self):
        report = diffusivity_report(Estimate(1.0, 0.1, 10), Estimate(1.2, 0.1, 10),
                                    a_ST_doubled=Estimate(1.2, 0.0, 10), S=8.0, T=8.0, gamma_reg=1.0)
        assert set(report.z_scores) == {'a_ST|a_msd', 'a_ST|a_ST_doubled'}
        assert report.z_scores['a_ST|a_msd'] == pytest.approx(0.2 / np.hypot(0.1, 0.1))
        assert report.to_dict()['a_corrector_form'] is None


class TestStationary:
    def test_zero_beta(self, small_spec, streams):
        result = stationary_covariance(small_spec, 0.0, 0.0, (0.0, 1.0), 8.0, 10, streams)
        assert list(result.values()) == [0.0, 0.0]
        assert result.decay_guard == pytest.approx(8.0 ** -0.5)

    def test_guards(self, small_spec, streams):
        with pytest.raises(ValidationError):
            stationary_covariance(small_spec, 0.2, 0.0, (0.0,), 4.0, 10, streams)
        with pytest.raises(ValidationError):
            stationary_covariance(small_spec, 0.2, 0.0, (3.0,), 8.0, 10, streams)

    def test_covariance_is_nonnegative_and_decays(self, small_spec, streams):
        result = stationary_covariance(small_spec, 0.5, 0.0, (0.0, 1.5), 8.0, 200, streams)
        values = result.values()
        assert np.all(values >= 0.0)
        assert values[0] > values[1]
        assert len(result.to_rows()) == 2

    def test_covariance_is_nonnegative_at_every_separation(self, small_spec, streams):
        separations = (0.0, 0.5, 1.0, 1.5, 2.0)
        result = stationary_covariance(small_spec, 0.3, 0.0, separations, 8.0, 100, streams)
        values = result.values()
        assert result.separations == separations
        assert np.all(values >= 0.0)
        assert values[0] > values[-1]
        assert all(e.stderr >= 0.0 for e in result.estimates)

    def test_swapping_the_two_ensembles_keeps_the_table(self, small_spec, streams):
        stage = as_stage(streams, 'pairs')
        first = sample_ensemble(100, np.zeros(3), 8.0, 0.0, DEFAULT_DT, stage.child('a'))
        second = sample_ensemble(100, np.zeros(3), 8.0, 0.0, DEFAULT_DT, stage.child('b'))
        separations = (0.0, 0.5, 1.0)
        forward = pair_covariance(first, second, small_spec.covariance, 0.5, 0.0, separations, 8.0)
        backward = pair_covariance(second, first, small_spec.covariance, 0.5, 0.0, separations, 8.0)
        np.testing.assert_allclose(forward[0], backward[0], rtol=1e-12)
        np.testing.assert_allclose(forward[1], backward[1], rtol=1e-12)
        assert np.all(forward[0] >= 0.0)

    def test_grid_route_without_potential(self, small_spec, streams):
        estimates = stationary_covariance_grid(small_spec, 0.0, 0.0, (0.0, 0.5), 1.0, 2, streams)
        assert [e.value for e in estimates] == pytest.approx([0.0, 0.0], abs=1e-12)
        with pytest.raises(ValidationError):
            stationary_covariance_grid(small_spec, 0.0, 0.0, (0.3,), 1.0, 2, streams)

    def test_decay_without_potential(self, small_spec, streams):
        report = psi_decay(small_spec, 0.0, 0.0, (1.0, 2.0), 2, streams)
        assert [e.value for e in report.estimates] == [0.0, 0.0]
        assert report.fit is None
        assert [row['S2'] for row in report.to_rows()] == [2.0, 4.0]


def test_realization_seeds_are_stable(streams):
    first = realization_seed(streams.stage('fields'), 3)
    again = realization_seed(streams.stage('fields'), 3)
    other = realization_seed(streams.stage('fields'), 4)
    assert first.generate_state(4).tolist() == again.generate_state(4).tolist()
    assert first.generate_state(4).tolist() != other.generate_state(4).tolist()
