import numpy as np
import pytest

from homogenization.corrector import (ErrorReport, _rate_fit, assemble_I, meso_schedule, strong_error, u1_eps_fk,
                                      u1_eps_pde, weak_error)
from homogenization.profiles import AffineProfile, ConstantProfile, GaussianProfile, Homogenized, gaussian_test_function
from she_core.errors import ValidationError
from she_core.estimates import Estimate
from she_core.fk_engine import sample_ensemble, sample_path
from she_core.grid_pde import Grid

GAMMA = 4.0 / 3.0


class TestSchedule:
    def test_spacing_and_endpoints(self):
        schedule = meso_schedule(0.1, GAMMA, 1.0)
        spacing = 0.1 ** -GAMMA
        assert schedule.K == 4
        assert schedule.times[0] == 0.0
        assert schedule.s_total == pytest.approx(100.0)
        assert np.allclose(schedule.intervals()[1:], spacing)
        assert schedule.intervals()[0] == pytest.approx(100.0 - 4 * spacing)
        assert schedule.segment_ends()[-1] == schedule.s_total
        assert len(schedule.segment_ends()) == schedule.K + 1

    def test_short_time_has_single_interval(self):
        schedule = meso_schedule(0.5, GAMMA, 0.1)
        assert schedule.K == 0
        assert schedule.times == pytest.approx((0.0, 0.4))

    @pytest.mark.parametrize('eps, gamma, t', [
        (1.0, GAMMA, 1.0),
        (0.0, GAMMA, 1.0),
        (0.1, 2.0, 1.0),
        (0.1, 1.0, 1.0),
        (0.1, GAMMA, 0.0),
    ])
    def test_invalid_parameters(self, eps, gamma, t):
        with pytest.raises(ValidationError):
            meso_schedule(eps, gamma, t)


class TestIntegral:
    def test_constant_gradient_telescopes(self, streams):
        schedule = meso_schedule(0.5, GAMMA, 1.0)
        batch = sample_ensemble(5, np.zeros(3), 4.0, 0.0, 0.05, streams.stage('paths'))
        v = np.array([1.0, -2.0, 0.5])
        value = assemble_I(batch, schedule, lambda time, points: np.broadcast_to(v, points.shape))
        expected = 0.5 * (batch.at(4.0) - batch.at(0.0)) @ v
        assert np.allclose(value, expected)

    def test_single_path(self, streams):
        schedule = meso_schedule(0.5, GAMMA, 1.0)
        path = sample_path(np.zeros(3), 4.0, 0.0, 0.05, streams.generator('paths', 0))
        value = assemble_I(path, schedule, lambda time, points: np.ones_like(points))
        assert isinstance(value, float)
        assert value == pytest.approx(0.5 * np.sum(path.forward[-1]))

    def test_path_must_cover_schedule(self, streams):
        schedule = meso_schedule(0.5, GAMMA, 1.0)
        path = sample_path(np.zeros(3), 2.0, 0.0, 0.05, streams.generator('paths', 0))
        with pytest.raises(ValidationError):
            assemble_I(path, schedule, lambda time, points: np.ones_like(points))


@pytest.fixture(scope='module')
def corrector_field(small_spec):
    return small_spec.sample((0.0, 4.0), 5)


class TestCorrector:
    def test_fk_constant_data(self, corrector_field, streams):
        ubar = Homogenized(ConstantProfile(), 1.0)
        estimate = u1_eps_fk(corrector_field, 1.0, np.zeros(3), 0.5, GAMMA, 0.3, 0.0, ubar, 10, streams)
        assert estimate.value == 0.0

    def test_fk_without_potential_is_centered(self, corrector_field, streams):
        ubar = Homogenized(GaussianProfile(1.0), 1.0)
        estimate = u1_eps_fk(corrector_field, 0.1, np.array([0.2, 0.0, 0.0]), 0.5, GAMMA, 0.0, 0.0,
                             ubar, 400, streams)
        assert estimate.stderr > 0.0
        assert estimate.within(0.0, k=4.0)

    def test_fk_with_potential_is_finite(self, corrector_field, streams):
        ubar = Homogenized(GaussianProfile(1.0), 1.0)
        estimate = u1_eps_fk(corrector_field, 1.0, np.zeros(3), 0.5, GAMMA, 0.3, 0.0, ubar, 50, streams)
        assert np.isfinite(estimate.value)

    def test_pde_constant_data(self, corrector_field):
        grid = Grid.for_field(corrector_field)
        ubar = Homogenized(ConstantProfile(), 1.0)
        result = u1_eps_pde(corrector_field, 0.1, 0.5, GAMMA, 0.3, 0.0, ubar, grid)
        assert not np.any(result.values)
        assert result.time == pytest.approx(0.4)

    def test_pde_memory_budget(self, corrector_field):
        grid = Grid.for_field(corrector_field)
        ubar = Homogenized(GaussianProfile(1.0), 1.0)
        with pytest.raises(ValidationError):
            u1_eps_pde(corrector_field, 0.1, 0.5, GAMMA, 0.3, 0.0, ubar, grid, memory_budget=1)

    def test_pde_with_potential(self, corrector_field):
        grid = Grid.for_field(corrector_field)
        ubar = Homogenized(GaussianProfile(1.0), 1.0)
        result = u1_eps_pde(corrector_field, 1.0, 0.5, GAMMA, 0.3, 0.0, ubar, grid)
        assert np.all(np.isfinite(result.values))
        assert np.any(result.values)

    def test_pde_affine_data(self, corrector_field):
        grid = Grid.for_field(corrector_field)
        ubar = Homogenized(AffineProfile(np.array([1.0, 0.0, 0.0])), 1.0)
        result = u1_eps_pde(corrector_field, 0.1, 0.5, GAMMA, 0.3, 0.0, ubar, grid)
        assert np.any(result.values)


class TestStrongError:
    def test_constant_data_is_exact(self, small_spec, streams):
        ubar = Homogenized(ConstantProfile(), 1.0)
        report = strong_error(small_spec, 0.3, 0.0, ubar, 0.1, [(0.0, 0.0, 0.0)], (0.5,), 2, streams)
        assert report.estimates[0].value == 0.0
        assert report.wrap_guards == (0.0,)

    def test_heat_flow_matches_homogenized(self, medium_spec, streams):
        ubar = Homogenized(GaussianProfile(0.5), 1.0)
        report = strong_error(medium_spec, 0.0, 0.0, ubar, 0.1, [(0.0, 0.0, 0.0), (0.5, 0.0, 0.0)],
                              (0.5,), 2, streams, wrap_tolerance=0.01)
        assert report.estimates[0].value < 1e-3
        assert report.wrap_guards[0] > 0.0

    def test_probe_outside_box(self, small_spec, streams):
        ubar = Homogenized(ConstantProfile(), 1.0)
        with pytest.raises(ValidationError):
            strong_error(small_spec, 0.3, 0.0, ubar, 0.1, [(1.5, 0.0, 0.0)], (0.5,), 2, streams)

    def test_wrap_guard(self, small_spec, streams):
        ubar = Homogenized(GaussianProfile(0.5), 1.0)
        with pytest.raises(ValidationError):
            strong_error(small_spec, 0.3, 0.0, ubar, 0.1, [(0.0, 0.0, 0.0)], (0.2,), 2, streams)

    def test_rate_fit_needs_realizations(self, small_spec, streams):
        ubar = Homogenized(ConstantProfile(), 1.0)
        with pytest.raises(ValidationError):
            strong_error(small_spec, 0.3, 0.0, ubar, 0.1, [(0.0, 0.0, 0.0)], (0.5, 0.4), 2, streams,
                         fit_rate=True)


class TestWeakError:
    def test_constant_data_is_exact(self, small_spec, streams):
        ubar = Homogenized(ConstantProfile(), 1.0)
        report = weak_error(small_spec, 0.3, 0.0, ubar, gaussian_test_function(), 0.1, GAMMA, (0.6,), 2,
                            streams)
        assert report.estimates[0].value == 0.0
        assert report.fit is None
        assert report.gamma == pytest.approx(GAMMA)

    def test_support_must_fit_box(self, small_spec, streams):
        ubar = Homogenized(ConstantProfile(), 1.0)
        with pytest.raises(ValidationError):
            weak_error(small_spec, 0.3, 0.0, ubar, gaussian_test_function(), 0.1, GAMMA, (0.4,), 2, streams)

    def test_rate_fit_needs_realizations(self, small_spec, streams):
        ubar = Homogenized(ConstantProfile(), 1.0)
        with pytest.raises(ValidationError):
            weak_error(small_spec, 0.3, 0.0, ubar, gaussian_test_function(), 0.1, GAMMA, (0.6, 0.7), 2, streams)


class TestReport:
    def test_decreasing(self):
        down = ErrorReport('weak', (0.2, 0.4), (Estimate(1.0, 0.01, 5), Estimate(4.0, 0.01, 5)))
        up = ErrorReport('weak', (0.2, 0.4), (Estimate(4.0, 0.01, 5), Estimate(1.0, 0.01, 5)))
        assert down.decreasing()
        assert not up.decreasing()
        assert [row['epsilon'] for row in down.to_rows()] == [0.2, 0.4]

    def test_rate_fit_recovers_exponent(self):
        eps = (0.1, 0.2, 0.4)
        estimates = [Estimate(e ** 2, 0.0, 20) for e in eps]
        fit = _rate_fit(eps, estimates, 20, True)
        assert fit.slope == pytest.approx(2.0)
        assert _rate_fit(eps, estimates, 20, False) is None
        with pytest.raises(ValidationError):
            _rate_fit(eps, estimates, 5, True)
