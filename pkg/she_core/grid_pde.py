"""
Конечно-разностный решатель параболических задач на периодическом кубе

Все задачи (u, Ψ(·;S), обратная Φ, вынужденные θ_j и ω, u_{1;j})
решаются одной схемой Стрэнга: полшага умножения на exp{(βV−λ)dt/2},
явный шаг диффузии с (2d+1)-точечным лапласианом, ещё полшага умножения.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import integrate, special

from .errors import NumericalError, ValidationError
from .estimates import Estimate
from .fk_engine import DEFAULT_DT, PathBatch, sample_ensemble, script_V_batch
from .persistence import save_array
from .random_field import FieldRealization, sphere_area
from .rng import as_stage

logger = logging.getLogger(__name__)

TIME_TOL = 1e-9
HERMITE_BUDGET = 2_000_000


@dataclass(frozen=True)
class Grid:
    """
    Периодическая решётка со стороной side, шагом h_x и шагом по времени dt_pde
    """

    dimension: int
    side: float
    h_x: float
    dt_pde: float

    def __post_init__(self):
        if self.dimension < 1:
            raise ValidationError(f"Некорректная размерность {self.dimension}")
        count = self.side / self.h_x
        if self.h_x <= 0 or abs(count - round(count)) > 1e-9 * max(1.0, count):
            raise ValidationError(f"Шаг h_x={self.h_x} не делит сторону {self.side}")
        limit = self.h_x ** 2 / (2 * self.dimension)
        if self.dt_pde <= 0 or self.dt_pde > limit * (1 + 1e-12):
            raise ValidationError(
                f"Нарушено условие устойчивости: dt_pde={self.dt_pde} > h_x²/(2d)={limit:.6g}"
            )

    @classmethod
    def for_field(cls, field_: FieldRealization, cfl_fraction: float = 1.0) -> 'Grid':
        """
        Решётка, совпадающая с решёткой поля, с dt_pde = cfl_fraction·h_x²/(2d)
        """
        d = field_.dimension
        return cls(d, field_.box, field_.h_x, cfl_fraction * field_.h_x ** 2 / (2 * d))

    @property
    def n(self) -> int:
        return int(round(self.side / self.h_x))

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.n,) * self.dimension

    @property
    def cell_volume(self) -> float:
        return self.h_x ** self.dimension

    def axis(self) -> np.ndarray:
        """Координаты узлов одной оси: (j − N/2)·h_x"""
        return (np.arange(self.n) - 0.5 * self.n) * self.h_x

    def mesh(self) -> np.ndarray:
        """Координаты всех узлов, форма (N, ..., N, d)"""
        axis = self.axis()
        return np.stack(np.meshgrid(*([axis] * self.dimension), indexing='ij'), axis=-1)

    def index_of(self, y) -> Tuple[int, ...]:
        """Ближайший узел к точке y (с периодическим заворачиванием)"""
        y = np.asarray(y, dtype=float)
        return tuple(int(v) for v in np.mod(np.rint(y / self.h_x + 0.5 * self.n), self.n).astype(int))

    def laplacian(self, u: np.ndarray) -> np.ndarray:
        out = -2.0 * self.dimension * u
        for k in range(self.dimension):
            out = out + np.roll(u, 1, axis=k) + np.roll(u, -1, axis=k)
        return out / self.h_x ** 2

    def gradient(self, u: np.ndarray, k: int) -> np.ndarray:
        """Центральная разность ∂u/∂y_k"""
        return (np.roll(u, -1, axis=k) - np.roll(u, 1, axis=k)) / (2.0 * self.h_x)

    def divergence(self, components: Sequence[np.ndarray]) -> np.ndarray:
        return sum(self.gradient(c, k) for k, c in enumerate(components))

    def check_field(self, field_: FieldRealization):
        if (field_.dimension != self.dimension or abs(field_.h_x - self.h_x) > 1e-12
                or abs(field_.box - self.side) > 1e-12):
            raise ValidationError(
                f"Решётка поля (d={field_.dimension}, L={field_.box}, h={field_.h_x}) "
                f"не совпадает с решёткой решателя (d={self.dimension}, L={self.side}, h={self.h_x})"
            )

    def steps(self, s0: float, s1: float) -> Tuple[int, float]:
        """
        Число шагов и эффективный шаг на отрезке [s0, s1]
        """
        span = abs(s1 - s0)
        if span <= TIME_TOL:
            return 0, 0.0
        count = int(np.ceil(span / self.dt_pde - 1e-9))
        return count, span / count


@dataclass(frozen=True, eq=False)
class GridFunction:
    """
    Значения на решётке в один момент времени
    """

    values: np.ndarray
    time: float
    grid: Grid

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericalError(f"Нечисловые значения на решётке в момент {self.time}")

    def at(self, y) -> float:
        return float(self.values[self.grid.index_of(y)])

    def mean(self) -> float:
        return float(np.mean(self.values))

    def mass(self) -> float:
        return float(np.sum(self.values) * self.grid.cell_volume)


@dataclass(frozen=True, eq=False)
class GridTrajectory:
    """
    Последовательность срезов с метками времени
    """

    times: np.ndarray
    values: np.ndarray
    grid: Grid

    def __len__(self) -> int:
        return self.times.size

    def index_of(self, time: float) -> int:
        k = int(np.argmin(np.abs(self.times - time)))
        if abs(self.times[k] - time) > 1e-7:
            raise ValidationError(f"Момент {time} не является срезом траектории")
        return k

    def at(self, time: float) -> GridFunction:
        return GridFunction(self.values[self.index_of(time)], float(time), self.grid)

    def final(self) -> GridFunction:
        return GridFunction(self.values[-1], float(self.times[-1]), self.grid)

    def save(self, directory, name: str = 'trajectory'):
        header = {
            'times': [float(t) for t in self.times],
            'dimension': self.grid.dimension,
            'side': self.grid.side,
            'h_x': self.grid.h_x,
            'dt_pde': self.grid.dt_pde,
        }
        return save_array(directory, name, self.values, header)


def strang_step(u: np.ndarray, potential: Optional[np.ndarray], beta: float, lam: float,
                dt: float, grid: Grid, forcing: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Один шаг схемы Стрэнга: u ← E·[E·u + dt(½Δ_h(E·u) + F)], E = exp{(βV−λ)dt/2}
    """
    if potential is None or beta == 0.0:
        half = np.exp(-lam * dt / 2.0)
    else:
        half = np.exp((beta * potential - lam) * (dt / 2.0))
    w = half * u
    w = w + dt * 0.5 * grid.laplacian(w)
    if forcing is not None:
        w = w + dt * forcing
    return half * w


def _potential(field_: Optional[FieldRealization], time: float, beta: float) -> Optional[np.ndarray]:
    if field_ is None or beta == 0.0:
        return None
    return field_.slice_at(time)


def step_she(state: GridFunction, field_: FieldRealization, beta: float, lam: float,
             dt_pde: Optional[float] = None) -> GridFunction:
    """
    Один шаг уравнения ∂u = ½Δu + (βV − λ)u из момента state.time
    """
    grid = state.grid
    dt = grid.dt_pde if dt_pde is None else float(dt_pde)
    if dt <= 0 or dt > grid.h_x ** 2 / (2 * grid.dimension) * (1 + 1e-12):
        raise ValidationError(f"Шаг dt={dt} нарушает условие устойчивости")
    grid.check_field(field_)
    field_.require_window(state.time, state.time + dt)
    values = strang_step(state.values, _potential(field_, state.time + dt / 2.0, beta), beta, lam, dt, grid)
    return GridFunction(values, state.time + dt, grid)


def solve_she(field_: Optional[FieldRealization], u0: np.ndarray, s0: float, s1: float,
              beta: float, lam: float, grid: Grid,
              breakpoints: Sequence[float] = (),
              store_all: bool = False,
              forcing: Optional[Callable[[int, float], np.ndarray]] = None
              ) -> Union[GridFunction, GridTrajectory]:
    """
    Решение задачи Коши на [s0, s1] (вперёд по времени)

    Args:
        field_: реализация поля (None — однородное уравнение при β = 0)
        u0: начальные данные на решётке в момент s0
        s0, s1: отрезок времени
        beta, lam: параметры уравнения
        grid: решётка
        breakpoints: обязательные моменты среза (отрезки между ними делятся отдельно)
        store_all: вернуть траекторию со всеми срезами
        forcing: правая часть F(номер шага, момент начала шага)

    Returns:
        GridFunction в момент s1 или GridTrajectory
    """
    if s1 < s0 - TIME_TOL:
        raise ValidationError(f"Обратный отрезок времени [{s0}, {s1}] для прямого решателя")
    if field_ is not None:
        grid.check_field(field_)
        if beta != 0.0:
            field_.require_window(s0, s1)
    u = np.array(u0, dtype=float, copy=True)
    if u.shape != grid.shape:
        raise ValidationError(f"Форма данных {u.shape} не совпадает с решёткой {grid.shape}")

    marks = [s0] + sorted(b for b in breakpoints if s0 + TIME_TOL < b < s1 - TIME_TOL) + [s1]
    times = [s0]
    slices = [u.copy()] if store_all else None
    step_index = 0
    for left, right in zip(marks[:-1], marks[1:]):
        count, dt = grid.steps(left, right)
        for k in range(count):
            t = left + k * dt
            rhs = forcing(step_index, t) if forcing is not None else None
            u = strang_step(u, _potential(field_, t + dt / 2.0, beta), beta, lam, dt, grid, rhs)
            step_index += 1
            if store_all:
                times.append(right if k == count - 1 else left + (k + 1) * dt)
                slices.append(u.copy())
    if not np.all(np.isfinite(u)):
        raise NumericalError(f"Нечисловые значения при решении на [{s0}, {s1}]")
    if store_all:
        times[-1] = s1
        return GridTrajectory(np.array(times), np.stack(slices), grid)
    return GridFunction(u, float(s1), grid)


def solve_psi_S(field_: FieldRealization, S: float, s_eval: float, beta: float, lam: float,
                grid: Grid, breakpoints: Sequence[float] = (),
                store_all: bool = False) -> Union[GridFunction, GridTrajectory]:
    """
    Ψ(s_eval, ·; S): данные 1 в момент −S, решение до s_eval
    """
    if s_eval < -S - TIME_TOL:
        raise ValidationError(f"s_eval={s_eval} раньше начального момента −S={-S}")
    field_.require_window(-S, s_eval)
    return solve_she(field_, np.ones(grid.shape), -S, s_eval, beta, lam, grid, breakpoints, store_all)


def solve_phi_T(field_: FieldRealization, T: float, s_eval: float, beta: float, lam: float,
                grid: Grid) -> GridFunction:
    """
    Обратная задача −∂Φ = ½ΔΦ + (βV − λ)Φ с Φ(T) = 1, решение до s_eval ≤ T
    """
    if s_eval > T + TIME_TOL:
        raise ValidationError(f"s_eval={s_eval} позже конечного момента T={T}")
    grid.check_field(field_)
    field_.require_window(s_eval, T)
    phi = np.ones(grid.shape)
    count, dt = grid.steps(s_eval, T)
    for k in range(count):
        t = T - k * dt
        phi = strang_step(phi, _potential(field_, t - dt / 2.0, beta), beta, lam, dt, grid)
    return GridFunction(phi, float(s_eval), grid)


def solve_omega(field_: FieldRealization, S: float, s_eval: float, beta: float, lam: float,
                grid: Grid) -> Tuple[GridFunction, List[GridFunction]]:
    """
    Ψ(·;S) и корректор ω^{(k)}(·;S) синхронными шагами

    ∂ω^{(k)} = ½Δω^{(k)} + (βV − λ)ω^{(k)} + ∂_kΨ(·;S), ω(−S) = 0.

    Returns:
        (Ψ в момент s_eval, список d компонент ω в момент s_eval)
    """
    grid.check_field(field_)
    field_.require_window(-S, s_eval)
    d = grid.dimension
    psi = np.ones(grid.shape)
    omega = [np.zeros(grid.shape) for _ in range(d)]
    count, dt = grid.steps(-S, s_eval)
    for k in range(count):
        t = -S + k * dt
        potential = _potential(field_, t + dt / 2.0, beta)
        omega = [strang_step(omega[c], potential, beta, lam, dt, grid, grid.gradient(psi, c))
                 for c in range(d)]
        psi = strang_step(psi, potential, beta, lam, dt, grid)
    return (GridFunction(psi, float(s_eval), grid),
            [GridFunction(w, float(s_eval), grid) for w in omega])


def theta_segment(j: int, gamma: float, eps: float, t: float) -> Tuple[float, float]:
    """
    Отрезок [ε^{−γ}(j−1), min(ε^{−γ}j, ε^{−2}t)] для θ_j
    """
    if j < 1:
        raise ValidationError(f"Номер мезоскопического отрезка должен быть ≥ 1, получено {j}")
    spacing = eps ** -gamma
    end = min(spacing * j, eps ** -2 * t)
    start = spacing * (j - 1)
    if start > end + TIME_TOL:
        raise ValidationError(f"Отрезок θ_{j} пуст: начало {start} позже ε^{{−2}}t={end}")
    return start, end


def solve_theta(field_: FieldRealization, psi: GridTrajectory, j: int, gamma: float, eps: float,
                k: int, beta: float, lam: float, grid: Grid, t: float = 1.0) -> GridTrajectory:
    """
    θ_j^{(k)} на мезоскопическом отрезке с нулевыми данными в его начале

    Правая часть — центральная разность ∂_kΨ в момент начала каждого шага;
    шаги совпадают со срезами сохранённой траектории Ψ.
    """
    start, end = theta_segment(j, gamma, eps, t)
    first, last = psi.index_of(start), psi.index_of(end)
    field_.require_window(start, end)
    grid.check_field(field_)
    theta = np.zeros(grid.shape)
    times = [psi.times[first]]
    slices = [theta.copy()]
    for idx in range(first, last):
        s_left, s_right = psi.times[idx], psi.times[idx + 1]
        dt = s_right - s_left
        theta = strang_step(theta, _potential(field_, s_left + dt / 2.0, beta), beta, lam, dt, grid,
                            grid.gradient(psi.values[idx], k))
        times.append(s_right)
        slices.append(theta.copy())
    return GridTrajectory(np.array(times), np.stack(slices), grid)


def solve_u1j(field_: FieldRealization, theta_slices: Sequence[np.ndarray],
              grad_ubar: Sequence[np.ndarray], s_start: float, s_end: float,
              beta: float, lam: float, grid: Grid) -> GridFunction:
    """
    u_{1;j}: однородная эволюция данных Σ_k θ_j^{(k)}·∂_kū с момента s_start до s_end
    """
    if theta_slices is None or grad_ubar is None:
        raise ValidationError("Для u_{1;j} нужны срезы θ_j и значения ∇ū")
    if len(theta_slices) != grid.dimension or len(grad_ubar) != grid.dimension:
        raise ValidationError("Число компонент θ_j и ∇ū должно совпадать с размерностью")
    initial = sum(np.asarray(th) * np.asarray(g) for th, g in zip(theta_slices, grad_ubar))
    if not np.any(initial):
        return GridFunction(np.zeros(grid.shape), float(s_end), grid)
    return solve_she(field_, initial, s_start, s_end, beta, lam, grid)


@dataclass(frozen=True)
class HeatKernelGa:
    """
    Тепловое ядро G_a(t, x) = (2πat)^{−d/2} exp{−|x|²/(2at)}
    """

    a: float
    dimension: int = 3

    def __post_init__(self):
        if self.a <= 0:
            raise ValidationError(f"Диффузия должна быть положительной, получено a={self.a}")

    def __call__(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        var = self.a * t
        r2 = np.sum(x ** 2, axis=-1)
        return (2.0 * np.pi * var) ** (-self.dimension / 2.0) * np.exp(-r2 / (2.0 * var))

    def mass(self, t: float) -> float:
        """
        ∫G_a(t, x)dx радиальной квадратурой (должно быть 1)
        """
        d = self.dimension
        scale = np.sqrt(self.a * t)
        value, _ = integrate.quad(
            lambda r: (2.0 * np.pi * self.a * t) ** (-d / 2.0) * np.exp(-r ** 2 / (2.0 * self.a * t)) * r ** (d - 1),
            0.0, 40.0 * scale, epsabs=0.0, epsrel=1e-12, limit=200
        )
        return float(sphere_area(d) * value)


def wrap_guard(side: float, a: float, t_micro: float, dimension: int = 3) -> float:
    """
    Вероятность того, что частица с диффузией a за время t_micro уйдёт
    хотя бы по одной оси дальше половины стороны куба
    """
    if t_micro <= 0:
        return 0.0
    tail = special.erfc(0.5 * side / np.sqrt(2.0 * a * t_micro))
    return float(1.0 - (1.0 - tail) ** dimension)


def memory_estimate(grid: Grid, slices: int) -> int:
    """
    Память под slices срезов решётки (байты, float64)
    """
    return int(slices) * int(np.prod(grid.shape)) * 8


def homogenized_u(u0: Callable[[np.ndarray], np.ndarray], a: float, t: float, x,
                  order: int = 20) -> np.ndarray:
    """
    ū(t, x) = ∫G_a(t, x − z)u₀(z)dz тензорной квадратурой Гаусса–Эрмита

    Args:
        u0: начальные данные (векторизованная функция точек (..., d))
        a: эффективная диффузия
        t: макроскопическое время
        x: точки (m, d)
        order: число узлов на ось

    Returns:
        Значения ū в точках x
    """
    if a <= 0:
        raise ValidationError(f"Диффузия должна быть положительной, получено a={a}")
    if t < 0:
        raise ValidationError(f"Отрицательное время t={t}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if t == 0:
        return np.asarray(u0(x), dtype=float)
    d = x.shape[1]
    nodes, weights = hermgauss(order)
    mesh = np.stack(np.meshgrid(*([nodes] * d), indexing='ij'), axis=-1).reshape(-1, d)
    w = np.prod(np.stack(np.meshgrid(*([weights] * d), indexing='ij'), axis=-1).reshape(-1, d), axis=1)
    w = w / np.pi ** (d / 2.0)
    shifts = np.sqrt(2.0 * a * t) * mesh
    out = np.empty(x.shape[0])
    chunk_size = max(1, HERMITE_BUDGET // shifts.shape[0])
    for start in range(0, x.shape[0], chunk_size):
        chunk = x[start:start + chunk_size]
        values = np.asarray(u0(chunk[:, None, :] + shifts[None, :, :]), dtype=float)
        out[start:start + chunk.shape[0]] = values @ w
    return out


def omega_fk(field_: FieldRealization, S: float, y, beta: float, lam: float, n: int,
             streams, dt: float = DEFAULT_DT, delta: float = 0.05) -> List[Estimate]:
    """
    ω(0, y; S) = ∇_ξ E exp{β∫_0^S V(−τ, B_τ + τξ)dτ − λS} при ξ = 0

    Градиент по ξ — центральная разность ±δ с общими случайными числами.
    """
    stage = as_stage(streams, 'omega_fk')
    y = np.asarray(y, dtype=float)
    d = y.size
    field_.require_window(-S, 0.0)
    paths = sample_ensemble(n, y, S, 0.0, dt, stage)
    times = paths.dt * np.arange(paths.positions.shape[1])
    result = []
    for k in range(d):
        drift = np.zeros(d)
        drift[k] = delta
        values = []
        for sign in (1.0, -1.0):
            shifted = PathBatch(paths.positions + sign * times[None, :, None] * drift, paths.dt,
                                paths.n_backward, paths.start, paths.stream_ids)
            values.append(np.exp(beta * script_V_batch(field_, 0.0, (0.0, S), shifted) - lam * S))
        result.append(Estimate.sample_mean((values[0] - values[1]) / (2.0 * delta), (stage.describe(),)))
    return result
