"""
Мезоскопический корректор u₁^ε и эксперименты со строгой и слабой ошибкой
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from she_core.errors import NumericalError, StatisticalGuardError, ValidationError
from she_core.estimates import Estimate, LinearFit, loglog_fit
from she_core.fk_engine import DEFAULT_DT, ESS_FLOOR, PathBatch, PathSample, sample_ensemble, script_V_batch
from she_core.grid_pde import (Grid, GridFunction, memory_estimate, solve_she, solve_theta,
                               solve_u1j, wrap_guard)
from she_core.parallel import map_items
from she_core.random_field import FieldRealization, FieldSpec
from she_core.rng import as_stage

from .homogenize import realization_seed
from .profiles import GaussianProfile, Homogenized

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = 4.0 / 3.0
MIN_FIT_REALIZATIONS = 20
DEFAULT_MEMORY_BUDGET = 2 * 1024 ** 3
DEFAULT_WRAP_TOLERANCE = 1e-3
FACTORIZATION_TOL = 1e-9


@dataclass(frozen=True)
class MesoSchedule:
    """
    Моменты r_0 = 0 < r_1 ≤ ... ≤ r_{K+1} = ε^{−2}t обновления ∇ū
    """

    eps: float
    gamma: float
    t: float
    K: int
    times: Tuple[float, ...]

    @property
    def s_total(self) -> float:
        return self.times[-1]

    @property
    def spacing(self) -> float:
        return self.eps ** -self.gamma

    def intervals(self) -> np.ndarray:
        return np.diff(np.asarray(self.times))

    def segment_ends(self) -> Tuple[float, ...]:
        """Концы отрезков θ_j: ε^{−γ}j для j ≤ K и ε^{−2}t для j = K + 1"""
        return tuple(self.spacing * j for j in range(1, self.K + 1)) + (self.s_total,)

    def to_dict(self) -> Dict:
        return {'eps': self.eps, 'gamma': self.gamma, 't': self.t, 'K': self.K, 'times': list(self.times)}


def meso_schedule(eps: float, gamma: float, t: float) -> MesoSchedule:
    """
    r_0 = 0, r_k = ε^{−2}t − ε^{−γ}(K − k + 1) для 1 ≤ k ≤ K + 1, K = ⌊ε^{γ−2}t⌋

    Каждый момент вычисляется по формуле, а не накоплением шагов.
    """
    if not 0.0 < eps < 1.0:
        raise ValidationError(f"ε должно лежать в (0, 1), получено {eps}")
    if not 1.0 < gamma < 2.0:
        raise ValidationError(f"γ должно лежать в (1, 2), получено {gamma}")
    if t <= 0:
        raise ValidationError(f"Макроскопическое время должно быть положительным, получено {t}")
    s_total = t / eps ** 2
    spacing = eps ** -gamma
    K = int(np.floor(eps ** (gamma - 2.0) * t + 1e-9))
    interior = [min(max(s_total - spacing * (K - k + 1), 0.0), s_total) for k in range(1, K + 1)]
    times = [0.0] + interior + [s_total]
    return MesoSchedule(float(eps), float(gamma), float(t), K, tuple(float(r) for r in times))


GradientFn = Callable[[float, np.ndarray], np.ndarray]


def assemble_I(path: Union[PathSample, PathBatch], schedule: MesoSchedule,
               grad_ubar: GradientFn):
    """
    ℐ = Σ_{k=0}^{K}(εB_{r_{k+1}} − εB_{r_k})·∇ū(t − ε²r_k, εB_{r_k})

    Положения в моменты r_k берутся линейной интерполяцией по решётке пути.

    Args:
        path: путь или пачка путей, покрывающая [0, ε^{−2}t]
        schedule: мезоскопическое расписание
        grad_ubar: ∇ū(время, точки (n, d)) -> (n, d)

    Returns:
        float для одного пути, массив для пачки
    """
    single = isinstance(path, PathSample)
    batch = path if not single else PathBatch(path.positions[None], path.dt, path.n_backward,
                                               path.start, np.array([path.stream_id]))
    if batch.t_max < schedule.s_total - 1e-9 or batch.t_min > 1e-9:
        raise ValidationError(
            f"Путь [{batch.t_min}, {batch.t_max}] не покрывает [0, {schedule.s_total}]"
        )
    eps = schedule.eps
    positions = eps * batch.position_at(schedule.times)
    total = np.zeros(len(batch))
    for k in range(schedule.K + 1):
        grad = np.asarray(grad_ubar(schedule.t - eps ** 2 * schedule.times[k], positions[:, k]))
        total += np.sum((positions[:, k + 1] - positions[:, k]) * grad, axis=1)
    return float(total[0]) if single else total


def _path_step(s_total: float, dt: float) -> float:
    """Шаг, ближайший к dt снизу и укладывающийся в s_total целое число раз"""
    return s_total / max(1, int(np.ceil(s_total / dt - 1e-9)))


def u1_eps_fk(field_: FieldRealization, t: float, x, eps: float, gamma: float, beta: float,
              lam: float, ubar: Homogenized, n: int, streams, dt: float = DEFAULT_DT,
              ess_floor: float = ESS_FLOOR) -> Estimate:
    """
    u₁^ε(t, x) = ε^{−1}·E exp{β𝒱_{ε^{−2}t}[B] − λε^{−2}t}·ℐ[B], B_0 = x/ε
    """
    schedule = meso_schedule(eps, gamma, t)
    stage = as_stage(streams, 'u1_fk')
    if ubar.u0.is_constant:
        return Estimate(0.0, 0.0, n, (stage.describe(),))
    s_total = schedule.s_total
    field_.require_window(0.0, s_total)
    start = np.asarray(x, dtype=float) / eps
    paths = sample_ensemble(n, start, s_total, 0.0, _path_step(s_total, dt), stage)
    weights = np.exp(beta * script_V_batch(field_, s_total, (0.0, s_total), paths) - lam * s_total)
    if not np.all(np.isfinite(weights)):
        raise NumericalError("Переполнение в весе Фейнмана–Каца для u₁^ε")
    ess = float(np.sum(weights) ** 2 / np.sum(weights ** 2))
    if ess < ess_floor:
        raise StatisticalGuardError(f"Вырожденные веса в u₁^ε: ESS={ess:.2f} < {ess_floor}")
    values = weights * assemble_I(paths, schedule, ubar.gradient) / eps
    return Estimate.sample_mean(values, (stage.describe(),))


def _grid_gradient(ubar: Homogenized, time: float, eps: float, grid: Grid) -> List[np.ndarray]:
    grad = ubar.gradient(time, eps * grid.mesh())
    return [grad[..., k] for k in range(grid.dimension)]


def _u1_with_psi(field_: FieldRealization, t: float, eps: float, gamma: float, beta: float,
                 lam: float, ubar: Homogenized, grid: Grid,
                 memory_budget: int) -> Tuple[GridFunction, GridFunction]:
    """
    u₁^ε и Ψ(ε^{−2}t, ·) на решётке; траектория Ψ хранится только на текущем отрезке
    """
    schedule = meso_schedule(eps, gamma, t)
    s_total = schedule.s_total
    field_.require_window(0.0, s_total)
    d = grid.dimension
    longest = max(grid.steps(0.0, min(schedule.spacing, s_total))[0], 1) + 1
    need = memory_estimate(grid, longest * (d + 1))
    if need > memory_budget:
        raise ValidationError(
            f"Траектория отрезка займёт {need / 1024 ** 2:.1f} МБ при бюджете {memory_budget / 1024 ** 2:.1f} МБ"
        )

    psi = np.ones(grid.shape)
    u1 = np.zeros(grid.shape)
    left = 0.0
    for j, right in enumerate(schedule.segment_ends(), start=1):
        trajectory = solve_she(field_, psi, left, right, beta, lam, grid, store_all=True)
        psi = trajectory.values[-1]
        if ubar.u0.is_constant or beta == 0.0:
            left = right
            continue
        theta = [solve_theta(field_, trajectory, j, gamma, eps, k, beta, lam, grid, t).values[-1]
                 for k in range(d)]
        if j <= schedule.K:
            grad = _grid_gradient(ubar, eps ** 2 * right, eps, grid)
            u1 = u1 + solve_u1j(field_, theta, grad, right, s_total, beta, lam, grid).values
        else:
            grad = _grid_gradient(ubar, t, eps, grid)
            u1 = u1 + sum(th * g for th, g in zip(theta, grad))
        logger.debug(f"u₁^ε: отрезок {j}/{schedule.K + 1} [{left:.4g}, {right:.4g}] готов")
        left = right
    return GridFunction(u1, s_total, grid), GridFunction(psi, s_total, grid)


def u1_eps_pde(field_: FieldRealization, t: float, eps: float, gamma: float, beta: float,
               lam: float, ubar: Homogenized, grid: Grid,
               memory_budget: int = DEFAULT_MEMORY_BUDGET) -> GridFunction:
    """
    u₁^ε(t, εy) = Σ_{j≤K}u_{1;j}(ε^{−2}t, y) + θ_{K+1}(ε^{−2}t, y)·∇ū(t, εy) на решётке

    Args:
        field_: реализация поля, покрывающая [0, ε^{−2}t]
        t: макроскопическое время
        eps, gamma: масштаб и показатель мезоскопических отрезков
        beta, lam: параметры уравнения
        ubar: однородное решение ū
        grid: решётка
        memory_budget: допустимый объём траектории Ψ одного отрезка (байты)

    Returns:
        GridFunction в микроскопический момент ε^{−2}t
    """
    u1, _ = _u1_with_psi(field_, t, eps, gamma, beta, lam, ubar, grid, memory_budget)
    return u1


@dataclass(frozen=True)
class ErrorReport:
    """
    Статистика ошибки по сетке ε с подгонкой показателя в log–log
    """

    kind: str
    eps_grid: Tuple[float, ...]
    estimates: Tuple[Estimate, ...]
    gamma: Optional[float] = None
    fit: Optional[LinearFit] = None
    wrap_guards: Tuple[float, ...] = ()
    seeds: Tuple[str, ...] = ()
    extras: Dict = field(default_factory=dict)

    def decreasing(self, k: float = 4.0) -> bool:
        """Статистика убывает вместе с ε (с запасом k стандартных ошибок)"""
        order = np.argsort(self.eps_grid)[::-1]
        values = [self.estimates[i] for i in order]
        return all(b.value < a.value + k * np.hypot(a.stderr, b.stderr) for a, b in zip(values, values[1:]))

    def to_rows(self) -> List[Dict]:
        rate = None if self.fit is None else self.fit.slope
        residual = None if self.fit is None else self.fit.max_residual
        return [{
            'epsilon': eps,
            'gamma': self.gamma,
            'statistic': est.value,
            'stderr': est.stderr,
            'n': est.n,
            'fit_rate': rate,
            'fit_residual': residual,
        } for eps, est in zip(self.eps_grid, self.estimates)]

    def to_dict(self) -> Dict:
        return {
            'kind': self.kind,
            'gamma': self.gamma,
            'eps_grid': list(self.eps_grid),
            'estimates': [e.to_dict() for e in self.estimates],
            'fit': None if self.fit is None else self.fit.to_dict(),
            'wrap_guards': list(self.wrap_guards),
            'seeds': list(self.seeds),
            **self.extras,
        }


def _micro_variance(ubar: Homogenized, eps: float, s_total: float) -> float:
    """Дисперсия, с которой решение расползается по микроскопическому боксу"""
    spread = ubar.a * s_total
    if isinstance(ubar.u0, GaussianProfile):
        spread += (ubar.u0.sigma / eps) ** 2
    return spread


def _check_wrap(field_spec: FieldSpec, ubar: Homogenized, eps: float, t: float,
                tolerance: float) -> float:
    if ubar.u0.is_constant:
        return 0.0
    guard = wrap_guard(field_spec.box, 1.0, _micro_variance(ubar, eps, t / eps ** 2), field_spec.dimension)
    if guard > tolerance:
        raise ValidationError(
            f"Бокс L={field_spec.box} мал для ε={eps}: вероятность заворачивания {guard:.3g} > {tolerance}"
        )
    return guard


def _check_factorization(ubar: Homogenized, q: np.ndarray, scale: float, eps: float):
    if ubar.u0.is_constant and np.max(np.abs(q)) > FACTORIZATION_TOL * max(1.0, scale):
        raise NumericalError(
            f"Для постоянных данных u = u₀Ψ должно выполняться точно, а max|q|={np.max(np.abs(q)):.3g} (ε={eps})"
        )


def _rate_fit(eps_grid: Sequence[float], estimates: Sequence[Estimate], realizations: int,
              fit_rate: bool) -> Optional[LinearFit]:
    if not fit_rate or len(eps_grid) < 2:
        return None
    if realizations < MIN_FIT_REALIZATIONS:
        raise ValidationError(
            f"Для подгонки показателя нужно не меньше {MIN_FIT_REALIZATIONS} реализаций на ε, получено {realizations}"
        )
    values = np.array([e.value for e in estimates])
    if np.any(values <= 0):
        logger.warning("Статистика ошибки неположительна при некотором ε: подгонка в log–log пропущена")
        return None
    return loglog_fit(eps_grid, values)


def strong_error(field_spec: FieldSpec, beta: float, lam: float, ubar: Homogenized, t: float,
                 probes, eps_grid: Sequence[float], realizations: int, streams,
                 cfl_fraction: float = 1.0, wrap_tolerance: float = DEFAULT_WRAP_TOLERANCE,
                 fit_rate: bool = False,
                 progress: Optional[Callable[[str, float], None]] = None) -> ErrorReport:
    """
    E|u^ε − ūΨ^ε|² в макроскопических точках probes для каждого ε

    u^ε и Ψ^ε решаются на одной реализации поля; точки сопоставляются
    ближайшим узлам решётки y = x/ε. progress(сообщение, доля) вызывается
    после каждого ε.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    stage = as_stage(streams, 'strong')
    eps_grid = tuple(float(e) for e in eps_grid)
    estimates, guards = [], []
    logger.info(f"=== Строгая ошибка: ε={list(eps_grid)}, реализаций {realizations} ===")
    for i, eps in enumerate(eps_grid):
        if not 0.0 < eps < 1.0:
            raise ValidationError(f"ε должно лежать в (0, 1), получено {eps}")
        s_total = t / eps ** 2
        guards.append(_check_wrap(field_spec, ubar, eps, t, wrap_tolerance))
        if np.any(np.abs(probes / eps) >= field_spec.box / 2):
            raise ValidationError(f"Точки наблюдения выходят из бокса при ε={eps}")
        window = field_spec.covering_window(0.0, s_total)
        eps_stage = stage.child(f'eps{i}')

        def one(r: int, eps=eps, s_total=s_total, window=window, eps_stage=eps_stage) -> float:
            field_ = field_spec.sample(window, realization_seed(eps_stage, r))
            grid = Grid.for_field(field_, cfl_fraction)
            mesh = grid.mesh()
            u = solve_she(field_, ubar.u0.value(eps * mesh), 0.0, s_total, beta, lam, grid).values
            psi = solve_she(field_, np.ones(grid.shape), 0.0, s_total, beta, lam, grid).values
            nodes = [grid.index_of(p / eps) for p in probes]
            points = np.array([mesh[idx] for idx in nodes]) * eps
            ubar_t = np.atleast_1d(ubar.value(t, points))
            q = np.array([u[idx] for idx in nodes]) - ubar_t * np.array([psi[idx] for idx in nodes])
            _check_factorization(ubar, q, float(np.max(np.abs(u))), eps)
            return float(np.mean(q ** 2))

        values = np.array(map_items(one, list(range(realizations))))
        estimates.append(Estimate.sample_mean(values, (eps_stage.describe(),)))
        logger.info(f"Шаг {i + 1}: ε={eps}, E|q|²={estimates[-1].value:.4g}±{estimates[-1].stderr:.2g}")
        if progress is not None:
            progress(f"ε={eps}", (i + 1) / len(eps_grid))

    fit = _rate_fit(eps_grid, estimates, realizations, fit_rate)
    report = ErrorReport('strong', eps_grid, tuple(estimates), None, fit, tuple(guards), (stage.describe(),))
    if len(eps_grid) > 1 and not report.decreasing():
        logger.warning("Строгая ошибка не убывает с ε в пределах 4 стандартных ошибок")
    return report


def weak_error(field_spec: FieldSpec, beta: float, lam: float, ubar: Homogenized, g: GaussianProfile,
               t: float, gamma: float, eps_grid: Sequence[float], realizations: int, streams,
               cfl_fraction: float = 1.0, wrap_tolerance: float = DEFAULT_WRAP_TOLERANCE,
               memory_budget: int = DEFAULT_MEMORY_BUDGET, fit_rate: bool = True,
               progress: Optional[Callable[[str, float], None]] = None) -> ErrorReport:
    """
    ε^{−d+2}·E(∫g·q^ε)², q^ε = u^ε − Ψ^ε ū − εu₁^ε, по сетке ε и показатель 2ζ̂

    Args:
        field_spec: спецификация поля
        beta, lam: параметры уравнения
        ubar: однородное решение ū
        g: тестовая функция
        t: макроскопическое время
        gamma: показатель мезоскопических отрезков
        eps_grid: сетка ε
        realizations: число реализаций поля на каждое ε
        streams: источник случайности
        fit_rate: подгонять ли показатель (нужно ≥ 20 реализаций)
        progress: необязательный отчёт о ходе работы (сообщение, доля)

    Returns:
        ErrorReport
    """
    stage = as_stage(streams, 'weak')
    eps_grid = tuple(float(e) for e in eps_grid)
    d = field_spec.dimension
    if fit_rate and len(eps_grid) > 1 and realizations < MIN_FIT_REALIZATIONS:
        raise ValidationError(
            f"Для подгонки показателя нужно не меньше {MIN_FIT_REALIZATIONS} реализаций на ε, получено {realizations}"
        )
    radius = g.cutoff if g.cutoff is not None else 4.0 * g.sigma
    estimates, guards = [], []
    logger.info(f"=== Слабая ошибка: γ={gamma}, ε={list(eps_grid)}, реализаций {realizations} ===")
    for i, eps in enumerate(eps_grid):
        schedule = meso_schedule(eps, gamma, t)
        guards.append(_check_wrap(field_spec, ubar, eps, t, wrap_tolerance))
        if radius / eps >= field_spec.box / 2:
            raise ValidationError(f"Носитель g(ε·) не помещается в бокс при ε={eps}")
        window = field_spec.covering_window(0.0, schedule.s_total)
        eps_stage = stage.child(f'eps{i}')

        def one(r: int, eps=eps, window=window, eps_stage=eps_stage, schedule=schedule) -> float:
            field_ = field_spec.sample(window, realization_seed(eps_stage, r))
            grid = Grid.for_field(field_, cfl_fraction)
            mesh = grid.mesh()
            # u и Ψ должны идти одними и теми же шагами, что и отрезки корректора
            u = solve_she(field_, ubar.u0.value(eps * mesh), 0.0, schedule.s_total, beta, lam, grid,
                          breakpoints=schedule.segment_ends()[:-1]).values
            u1, psi = _u1_with_psi(field_, t, eps, gamma, beta, lam, ubar, grid, memory_budget)
            q = u - psi.values * ubar.value(t, eps * mesh) - eps * u1.values
            _check_factorization(ubar, q, float(np.max(np.abs(u))), eps)
            integral = (eps * grid.h_x) ** d * np.sum(g.value(eps * mesh) * q)
            return float((eps ** (1.0 - d / 2.0) * integral) ** 2)

        values = np.array(map_items(one, list(range(realizations))))
        estimates.append(Estimate.sample_mean(values, (eps_stage.describe(),)))
        logger.info(f"Шаг {i + 1}: ε={eps}, K={schedule.K}, статистика={estimates[-1].value:.4g}"
                    f"±{estimates[-1].stderr:.2g}")
        if progress is not None:
            progress(f"ε={eps}, K={schedule.K}", (i + 1) / len(eps_grid))

    fit = _rate_fit(eps_grid, estimates, realizations, fit_rate)
    if fit is not None:
        logger.info(f"Слабая ошибка: 2ζ̂={fit.slope:.3f}, остаток {fit.max_residual:.3g}"
                    f"{' (оценка ориентировочная)' if fit.indicative else ''}")
    return ErrorReport('weak', eps_grid, tuple(estimates), float(gamma), fit, tuple(guards), (stage.describe(),))
