import numpy as np
import pytest

from she_core.errors import FieldWindowError, NumericalError, ValidationError
from she_core.fk_engine import psi_fk
from she_core.grid_pde import (Grid, GridFunction, HeatKernelGa, homogenized_u, memory_estimate, omega_fk,
                               solve_omega, solve_phi_T, solve_psi_S, solve_she, solve_theta, solve_u1j,
                               step_she, theta_segment, wrap_guard)
from she_core.random_field import FieldRealization

GAMMA = 4.0 / 3.0


@pytest.fixture(scope='module')
def grid():
    return Grid(3, 4.0, 0.25, 0.01)


def point_mass(grid: Grid) -> np.ndarray:
    u = np.zeros(grid.shape)
    u[grid.index_of(np.zeros(3))] = 1.0 / grid.cell_volume
    return u


class TestGrid:
    def test_stability_condition(self):
        with pytest.raises(ValidationError):
            Grid(3, 4.0, 0.25, 0.02)
        with pytest.raises(ValidationError):
            Grid(3, 4.0, 0.3, 0.001)

    def test_for_field(self, small_field):
        grid = Grid.for_field(small_field, 0.5)
        assert grid.shape == (16, 16, 16)
        assert grid.dt_pde == pytest.approx(0.25 ** 2 / 12)

    def test_index_wraps(self, grid):
        assert grid.index_of(np.zeros(3)) == (8, 8, 8)
        assert grid.index_of(np.array([4.0, 0.0, 0.0])) == (8, 8, 8)

    def test_steps(self, grid):
        count, dt = grid.steps(0.0, 0.105)
        assert count == 11
        assert dt == pytest.approx(0.105 / 11)
        assert grid.steps(1.0, 1.0) == (0, 0.0)

    def test_nan_guard(self, grid):
        values = np.ones(grid.shape)
        values[0, 0, 0] = np.nan
        with pytest.raises(NumericalError):
            GridFunction(values, 0.0, grid)


class TestHeatFlow:
    def test_mass_is_conserved(self):
        grid = Grid(3, 8.0, 0.25, 0.01)
        result = solve_she(None, point_mass(grid), 0.0, 1.0, 0.0, 0.0, grid)
        assert result.mass() == pytest.approx(1.0, rel=1e-12)
        assert result.values.min() >= 0.0

    def test_second_moment_grows_linearly(self):
        grid = Grid(3, 8.0, 0.25, 0.01)
        result = solve_she(None, point_mass(grid), 0.0, 1.0, 0.0, 0.0, grid)
        r2 = np.sum(grid.mesh() ** 2, axis=-1)
        second = np.sum(result.values * r2) / np.sum(result.values)
        assert second == pytest.approx(3.0, abs=1e-2)

    def test_constant_data_decays_with_lambda(self, grid):
        result = solve_she(None, np.ones(grid.shape), 0.0, 1.0, 0.0, 0.3, grid)
        assert np.allclose(result.values, np.exp(-0.3), rtol=1e-12)

    def test_constant_potential_step(self, kernel, grid):
        field = FieldRealization.constant(0.4, kernel, 4.0, 0.25, (0.0, 1.0), 0.25)
        state = step_she(GridFunction(np.ones(grid.shape), 0.0, grid), field, 0.5, 0.1)
        assert np.allclose(state.values, np.exp((0.2 - 0.1) * grid.dt_pde))
        assert state.time == pytest.approx(grid.dt_pde)

    def test_positivity_with_potential(self, small_field, grid):
        result = solve_she(small_field, point_mass(grid), -1.0, 1.0, 0.5, 0.0, grid)
        assert result.values.min() >= 0.0

    def test_window_and_shape_checks(self, small_field, grid):
        with pytest.raises(FieldWindowError):
            solve_she(small_field, np.ones(grid.shape), -1.0, 3.0, 0.5, 0.0, grid)
        with pytest.raises(ValidationError):
            solve_she(small_field, np.ones((8, 8, 8)), 0.0, 1.0, 0.5, 0.0, grid)
        with pytest.raises(ValidationError):
            solve_she(small_field, np.ones(grid.shape), 1.0, 0.0, 0.5, 0.0, grid)

    def test_trajectory_times(self, grid):
        trajectory = solve_she(None, np.ones(grid.shape), 0.0, 0.1, 0.0, 0.0, grid,
                               breakpoints=(0.05,), store_all=True)
        assert trajectory.times[0] == 0.0
        assert trajectory.times[-1] == 0.1
        assert len(trajectory) == trajectory.values.shape[0]
        assert trajectory.at(0.05).time == pytest.approx(0.05)
        with pytest.raises(ValidationError):
            trajectory.at(0.0123)


class TestPsiAndPhi:
    def test_zero_beta_psi_is_one(self, small_field, grid):
        psi = solve_psi_S(small_field, 1.0, 0.5, 0.0, 0.0, grid)
        assert np.array_equal(psi.values, np.ones(grid.shape))

    def test_duality_between_forward_and_backward(self, small_field, grid):
        beta, lam = 0.5, 0.1
        trajectory = solve_psi_S(small_field, 1.0, 1.0, beta, lam, grid, breakpoints=(0.0,), store_all=True)
        phi = solve_phi_T(small_field, 1.0, 0.0, beta, lam, grid)
        forward = np.sum(trajectory.final().values)
        paired = np.sum(trajectory.at(0.0).values * phi.values)
        assert forward == pytest.approx(paired, rel=1e-10)

    def test_phi_direction(self, small_field, grid):
        with pytest.raises(ValidationError):
            solve_phi_T(small_field, 0.5, 1.0, 0.5, 0.0, grid)

    def test_omega_vanishes_without_potential(self, small_field, grid):
        psi, omega = solve_omega(small_field, 1.0, 0.0, 0.0, 0.0, grid)
        assert np.array_equal(psi.values, np.ones(grid.shape))
        assert all(not np.any(w.values) for w in omega)

    def test_omega_is_nonzero_with_potential(self, small_field, grid):
        _, omega = solve_omega(small_field, 1.0, 0.0, 0.5, 0.0, grid)
        assert len(omega) == 3
        assert any(np.any(w.values) for w in omega)


class TestMesoscopicCorrectors:
    def test_segments(self):
        spacing = 0.5 ** -GAMMA
        assert theta_segment(1, GAMMA, 0.5, 1.0) == pytest.approx((0.0, spacing))
        assert theta_segment(2, GAMMA, 0.5, 1.0) == pytest.approx((spacing, 4.0))
        with pytest.raises(ValidationError):
            theta_segment(0, GAMMA, 0.5, 1.0)
        with pytest.raises(ValidationError):
            theta_segment(3, GAMMA, 0.5, 1.0)

    @pytest.fixture(scope='class')
    def long_field(self, small_spec):
        return small_spec.sample((0.0, 4.0), 11)

    def test_theta_without_potential(self, long_field, grid):
        spacing = 0.5 ** -GAMMA
        psi = solve_she(long_field, np.ones(grid.shape), 0.0, 4.0, 0.0, 0.0, grid,
                        breakpoints=(spacing,), store_all=True)
        theta = solve_theta(long_field, psi, 1, GAMMA, 0.5, 0, 0.0, 0.0, grid, t=1.0)
        assert theta.times[-1] == pytest.approx(spacing)
        assert not np.any(theta.values)

    def test_theta_with_potential(self, long_field, grid):
        spacing = 0.5 ** -GAMMA
        psi = solve_she(long_field, np.ones(grid.shape), 0.0, 4.0, 0.4, 0.0, grid,
                        breakpoints=(spacing,), store_all=True)
        theta = solve_theta(long_field, psi, 2, GAMMA, 0.5, 1, 0.4, 0.0, grid, t=1.0)
        assert theta.times[0] == pytest.approx(spacing)
        assert not np.any(theta.values[0])
        assert np.any(theta.values[-1])
        assert np.all(np.isfinite(theta.values))

    def test_u1j(self, long_field, grid):
        zeros = [np.zeros(grid.shape)] * 3
        ones = [np.ones(grid.shape)] * 3
        assert not np.any(solve_u1j(long_field, zeros, ones, 0.0, 1.0, 0.4, 0.0, grid).values)
        evolved = solve_u1j(long_field, ones, [np.zeros(grid.shape), np.zeros(grid.shape), np.ones(grid.shape)],
                            0.0, 1.0, 0.0, 0.0, grid)
        assert np.allclose(evolved.values, 1.0)
        with pytest.raises(ValidationError):
            solve_u1j(long_field, zeros[:2], ones, 0.0, 1.0, 0.4, 0.0, grid)


class TestHomogenizedHelpers:
    def test_heat_kernel_mass(self):
        assert HeatKernelGa(2.0).mass(0.5) == pytest.approx(1.0, rel=1e-8)
        with pytest.raises(ValidationError):
            HeatKernelGa(0.0)

    def test_homogenized_gaussian(self):
        sigma2, a, t = 1.0, 0.5, 0.5
        points = np.array([[0.0, 0.0, 0.0], [0.3, -0.2, 0.5]])

        def u0(z):
            return np.exp(-np.sum(z ** 2, axis=-1) / (2 * sigma2))

        spread = sigma2 + a * t
        expected = (sigma2 / spread) ** 1.5 * np.exp(-np.sum(points ** 2, axis=1) / (2 * spread))
        assert np.allclose(homogenized_u(u0, a, t, points), expected, rtol=1e-6)
        assert np.allclose(homogenized_u(u0, a, 0.0, points), u0(points))

    def test_wrap_guard(self):
        assert wrap_guard(8.0, 1.0, 0.0) == 0.0
        assert wrap_guard(8.0, 1.0, 1.0) < wrap_guard(8.0, 1.0, 4.0)
        assert wrap_guard(16.0, 1.0, 4.0) < wrap_guard(8.0, 1.0, 4.0)
        assert 0.0 <= wrap_guard(2.0, 1.0, 100.0) <= 1.0

    def test_memory_estimate(self, grid):
        assert memory_estimate(grid, 10) == 10 * 16 ** 3 * 8

    def test_omega_fk_without_potential(self, small_field, streams):
        components = omega_fk(small_field, 1.0, np.zeros(3), 0.0, 0.0, 10, streams)
        assert [c.value for c in components] == [0.0, 0.0, 0.0]


@pytest.mark.slow
def test_psi_routes_agree(small_field, streams):
    grid = Grid.for_field(small_field)
    beta = 0.5
    pde = solve_psi_S(small_field, 0.5, 0.5, beta, 0.0, grid).at(np.zeros(3))
    fk = psi_fk(small_field, 0.5, np.zeros(3), beta, 0.0, 4000, streams, S=0.5)
    assert abs(fk.value - pde) <= 0.1 * pde + 4 * fk.stderr
