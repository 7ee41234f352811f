import numpy as np
import pytest

from she_core.errors import FieldWindowError, StatisticalGuardError, ValidationError
from she_core.fk_engine import (PathBatch, WeightedEnsemble, calibrate_lambda, lattice_steps, log_partition,
                                psi_fk, psi_pair_moment, sample_ensemble, sample_path, script_R, script_V,
                                tilt, tilted_expectation)
from she_core.parallel import parallel_settings
from she_core.random_field import FieldRealization


def zero_batch(n: int, horizon: float, dt: float) -> PathBatch:
    steps = lattice_steps(horizon, dt)
    return PathBatch(np.zeros((n, steps + 1, 3)), dt, 0, np.zeros(3), np.arange(n))


class TestPaths:
    def test_two_sided_path(self, streams):
        rng = streams.generator('paths', 0)
        path = sample_path((0.5, 0.0, -0.5), 1.0, 0.5, 0.05, rng, stream_id=3)
        assert path.positions.shape == (31, 3)
        assert np.array_equal(path.at(0.0), np.array([0.5, 0.0, -0.5]))
        assert path.t_min == pytest.approx(-0.5)
        assert path.t_max == pytest.approx(1.0)
        assert path.backward.shape == (11, 3)
        assert path.stream_id == 3

    def test_horizon_must_fit_lattice(self):
        with pytest.raises(ValidationError):
            lattice_steps(1.03, 0.05)
        with pytest.raises(ValidationError):
            lattice_steps(1.0, 0.0)

    def test_ensemble_independent_of_workers(self, streams):
        parallel_settings.configure(1, 4)
        serial = sample_ensemble(10, np.zeros(3), 1.0, 0.0, 0.05, streams.stage('x'))
        parallel_settings.configure(3, 3)
        threaded = sample_ensemble(10, np.zeros(3), 1.0, 0.0, 0.05, streams.stage('x'))
        assert np.array_equal(serial.positions, threaded.positions)
        assert list(serial.stream_ids) == list(range(10))

    def test_increment_variance(self, streams):
        batch = sample_ensemble(2000, np.zeros(3), 1.0, 0.0, 0.05, streams.stage('var'))
        end = batch.at(1.0)
        assert np.mean(np.sum(end ** 2, axis=1)) == pytest.approx(3.0, abs=0.3)

    def test_interpolation_and_coarsening(self, streams):
        batch = sample_ensemble(3, np.zeros(3), 1.0, 0.0, 0.05, streams.stage('x'))
        mid = batch.position_at([0.025])[:, 0]
        assert np.allclose(mid, 0.5 * (batch.at(0.0) + batch.at(0.05)))
        coarse = batch.coarsen(2)
        assert coarse.dt == pytest.approx(0.1)
        assert np.array_equal(coarse.at(0.5), batch.at(0.5))
        with pytest.raises(ValidationError):
            batch.position_at([1.5])
        with pytest.raises(ValidationError):
            batch.coarsen(3)


class TestFunctionals:
    def test_script_V_on_constant_field(self, kernel, streams):
        field = FieldRealization.constant(0.5, kernel, 4.0, 0.25, (-2.0, 2.0), 0.25)
        batch = sample_ensemble(4, np.zeros(3), 2.0, 0.0, 0.05, streams.stage('x'))
        assert np.allclose(script_V(field, 1.0, (0.0, 2.0), batch), 1.0)
        assert script_V(field, 1.0, (0.0, 2.0), batch.path(0)) == pytest.approx(1.0)
        assert script_V(field, 1.0, (0.5, 0.5), batch.path(0)) == 0.0

    def test_script_V_window(self, small_field, streams):
        batch = sample_ensemble(2, np.zeros(3), 4.0, 0.0, 0.05, streams.stage('x'))
        with pytest.raises(FieldWindowError):
            script_V(small_field, 1.0, (0.0, 4.0), batch)

    def test_white_overlap_of_resting_paths(self, white_spec):
        batch = zero_batch(2, 4.0, 0.05)
        assert np.allclose(script_R((0.0, 4.0), (0.0, 4.0), batch, batch, white_spec.covariance), 4.0)

    def test_colored_overlap_symmetric_and_nonnegative(self, small_spec, streams):
        batch = sample_ensemble(2, np.zeros(3), 3.0, 0.0, 0.05, streams.stage('x'))
        a, b = batch.path(0), batch.path(1)
        cov = small_spec.covariance
        forward = script_R((0.0, 2.0), (0.0, 3.0), a, b, cov)
        swapped = script_R((0.0, 3.0), (0.0, 2.0), b, a, cov)
        assert forward == pytest.approx(swapped, rel=1e-12)
        assert np.all(script_R((0.0, 3.0), (0.0, 3.0), batch, batch, cov) >= 0.0)

    def test_resting_overlap_is_bounded_by_time_mass(self, small_spec):
        batch = zero_batch(1, 4.0, 0.05)
        kernel = small_spec.kernel
        bound = 4.0 * kernel.time_l1 ** 2 / kernel.time_l2
        value = script_R((0.0, 4.0), (0.0, 4.0), batch.path(0), batch.path(0), small_spec.covariance)
        assert 0.5 * bound < value <= bound * (1 + 1e-3)


class TestTilt:
    def test_zero_beta_is_untilted(self, small_spec, streams):
        batch = sample_ensemble(20, np.zeros(3), 2.0, 0.0, 0.05, streams.stage('x'))
        ensemble = tilt(batch, small_spec.covariance, 0.0, (0.0, 2.0))
        assert ensemble.ess == pytest.approx(20.0)
        estimate = tilted_expectation(np.arange(20.0), ensemble)
        assert estimate.value == pytest.approx(9.5)
        assert log_partition(ensemble).value == 0.0

    def test_degenerate_weights_trigger_guard(self):
        log_w = np.full(50, -50.0)
        log_w[0] = 0.0
        ensemble = WeightedEnsemble(None, log_w, (0.0, 1.0), 1.0, 2.0 * log_w)
        assert ensemble.ess < 2.0
        with pytest.raises(StatisticalGuardError):
            tilted_expectation(np.ones(50), ensemble)
        with pytest.raises(StatisticalGuardError):
            log_partition(ensemble)

    def test_uniform_log_weights(self):
        ensemble = WeightedEnsemble(None, np.full(40, 0.3), (0.0, 1.0), 1.0, np.full(40, 0.6))
        assert log_partition(ensemble).value == pytest.approx(0.3)

    def test_with_beta_reuses_overlaps(self, small_spec, streams):
        batch = sample_ensemble(10, np.zeros(3), 2.0, 0.0, 0.05, streams.stage('x'))
        ensemble = tilt(batch, small_spec.covariance, 0.2, (0.0, 2.0))
        doubled = ensemble.with_beta(0.4)
        assert np.allclose(doubled.log_weights, 4.0 * ensemble.log_weights)


class TestCalibration:
    def test_zero_beta(self, small_spec, streams):
        result = calibrate_lambda(0.0, small_spec, (4.0, 8.0, 16.0), 10, streams)
        assert result.lam.value == 0.0
        assert result.alpha_inf.value == 0.0
        assert result.c_bar == 1.0

    def test_white_in_time_is_exact(self, white_spec, streams):
        result = calibrate_lambda(0.3, white_spec, (4.0, 8.0, 12.0, 16.0), 50, streams, dt=0.25)
        assert result.lam.value == pytest.approx(0.5 * 0.3 ** 2, abs=1e-9)
        assert result.alpha_inf.value == pytest.approx(0.0, abs=1e-9)
        assert result.min_ess == pytest.approx(50.0)
        assert len(result.table_rows()) == 4

    def test_s_grid_must_cover_fit_window(self, small_spec, streams):
        with pytest.raises(ValidationError):
            calibrate_lambda(0.2, small_spec, (4.0, 8.0), 10, streams)
        with pytest.raises(ValidationError):
            calibrate_lambda(0.2, small_spec, (16.0,), 10, streams)

    def test_colored_lambda_is_positive_and_bounded(self, small_spec, streams):
        beta = 0.3
        result = calibrate_lambda(beta, small_spec, (4.0, 8.0, 12.0, 16.0), 100, streams,
                                  residual_max=1.0)
        kernel = small_spec.kernel
        ceiling = 0.5 * beta ** 2 * kernel.time_l1 ** 2 / kernel.time_l2
        assert result.lam.value > 0.0
        assert result.lam.value <= ceiling + 4 * result.lam.stderr + 1e-3
        assert result.to_dict()['mode'] == 'colored'


class TestPsi:
    def test_zero_beta_gives_one(self, small_field, streams):
        estimate = psi_fk(small_field, 1.0, np.zeros(3), 0.0, 0.0, 20, streams, S=0.5)
        assert estimate.value == 1.0
        assert estimate.stderr == 0.0

    def test_constant_field(self, kernel, streams):
        field = FieldRealization.constant(0.5, kernel, 4.0, 0.25, (-2.0, 2.0), 0.25)
        estimate = psi_fk(field, 1.0, np.zeros(3), 0.2, 0.0, 8, streams, S=0.5)
        assert estimate.value == pytest.approx(np.exp(0.15))

    def test_empty_horizon(self, small_field, streams):
        assert psi_fk(small_field, 0.0, np.zeros(3), 0.3, 0.1, 5, streams).value == 1.0

    def test_window_guard(self, small_field, streams):
        with pytest.raises(FieldWindowError):
            psi_fk(small_field, 3.0, np.zeros(3), 0.3, 0.0, 5, streams)

    def test_pair_moment_at_zero_beta(self, small_spec, streams):
        result = psi_pair_moment(small_spec, 2.0, 2.0, np.zeros(3), np.ones(3), 0.0, 0.0, 10, streams)
        assert result.moment.value == 1.0
        assert result.factor.value == 1.0

    def test_pair_moment_is_positive(self, small_spec, streams):
        result = psi_pair_moment(small_spec, 2.0, 2.0, np.zeros(3), np.zeros(3), 0.2, 0.01, 200, streams)
        assert result.factor.value >= 1.0
        assert result.moment.value > 0.0
