"""
Макроскопические параметры: константа c, эффективная диффузия a
(несколько независимых оценок), c̄ = e^{α_∞}, стационарная ковариация
и скорость сходимости Ψ(·;S) к стационарному решению
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, special
from scipy.special import logsumexp

from she_core.errors import StatisticalGuardError, ValidationError
from she_core.estimates import (Estimate, LinearFit, grouped_jackknife, jackknife_stderr,
                                loglog_fit, optional_dict, pairwise_z_scores, ratio_estimate,
                                z_score)
from she_core.fk_engine import (DEFAULT_DT, ESS_FLOOR, LambdaCalibration, PathBatch, overlap_R,
                                sample_ensemble, tilt, tilted_expectation)
from she_core.grid_pde import Grid, solve_omega, solve_phi_T, solve_psi_S
from she_core.markov_chain import RegenDiffusivity
from she_core.parallel import map_items
from she_core.random_field import FieldSpec
from she_core.rng import as_stage

logger = logging.getLogger(__name__)

QUAD_OPTIONS = {'epsabs': 0.0, 'epsrel': 1e-10, 'limit': 400}


def constant_c(d: int) -> float:
    """
    c = Γ(d/2 − 1)/(4π^{d/2}): ∫_0^∞∫G_a(r,z)G_a(r,z+x)dz dr = c/(a|x|^{d−2})
    """
    if d < 3:
        raise ValidationError(f"Константа c определена для d ≥ 3, получено d={d}")
    return float(special.gamma(d / 2.0 - 1.0) / (4.0 * np.pi ** (d / 2.0)))


def constant_c_quadrature(d: int) -> float:
    """
    Прямая квадратура определения c при a = 1, x = e₁

    Внутренний интеграл по z факторизуется по координатам; одномерные
    множители считаются численно.
    """
    if d < 3:
        raise ValidationError(f"Константа c определена для d ≥ 3, получено d={d}")

    def g1(r: float, z):
        return np.exp(-z ** 2 / (2.0 * r)) / np.sqrt(2.0 * np.pi * r)

    def inner(r: float) -> float:
        if r <= 0.0:
            return 0.0
        half = 12.0 * np.sqrt(r) + 2.0
        same, _ = integrate.quad(lambda z: g1(r, z) ** 2, -half, half, points=[0.0], **QUAD_OPTIONS)
        shifted, _ = integrate.quad(lambda z: g1(r, z) * g1(r, z + 1.0), -half, half,
                                    points=[-0.5], **QUAD_OPTIONS)
        return shifted * same ** (d - 1)

    head, _ = integrate.quad(inner, 0.0, 1.0, **QUAD_OPTIONS)
    tail, _ = integrate.quad(inner, 1.0, np.inf, **QUAD_OPTIONS)
    return float(head + tail)


def realization_seed(streams, index: int):
    """Сид i-й реализации поля"""
    return as_stage(streams, 'fields').seed_sequence(index)


def estimate_a_ST(field_spec: FieldSpec, beta: float, lam: float, S: float, T: float,
                  gamma_reg: float, n: int, streams, dt: float = DEFAULT_DT,
                  ess_floor: float = ESS_FLOOR) -> Estimate:
    """
    a_{S,T;γ} = 1 + 2/(dγ)·Ê_{[−T,S]}(B_S − B_γ)·B_γ по двусторонним путям

    Args:
        field_spec: спецификация поля
        beta: сила потенциала
        lam: λ (на наклон не влияет, передаётся для протокола)
        S, T: горизонты вперёд и назад
        gamma_reg: параметр регуляризации γ (≥ 4dt)
        n: размер ансамбля
        streams: источник случайности

    Returns:
        Estimate
    """
    if gamma_reg < 4.0 * dt - 1e-12:
        raise ValidationError(f"γ_reg={gamma_reg} меньше разрешения решётки 4dt={4.0 * dt}")
    if gamma_reg > S:
        raise ValidationError(f"γ_reg={gamma_reg} больше горизонта S={S}")
    stage = as_stage(streams, 'a_ST')
    d = field_spec.dimension
    paths = sample_ensemble(n, np.zeros(d), S, T, dt, stage)
    ensemble = tilt(paths, field_spec.covariance, beta, (-T, S))
    b_gamma = paths.at(gamma_reg) - paths.at(0.0)
    cross = np.sum((paths.at(S) - paths.at(gamma_reg)) * b_gamma, axis=1)
    inner = tilted_expectation(cross, ensemble, ess_floor, (stage.describe(),))
    factor = 2.0 / (d * gamma_reg)
    logger.debug(f"a_ST: S={S}, T={T}, γ={gamma_reg}, λ={lam}, ESS={ensemble.ess:.1f}")
    return Estimate(1.0 + factor * inner.value, factor * inner.stderr, inner.n, inner.seeds)


def estimate_a_corrector_form(field_spec: FieldSpec, beta: float, lam: float, S: float, T: float,
                              realizations: int, streams, cfl_fraction: float = 1.0,
                              k: float = 4.0) -> Estimate:
    """
    a_{S,T} = 1 + (2/d)·E[Φ∇·ω]/E[ΦΨ] по реализациям поля

    Φ(0,·;T) — обратное решение, Ψ(0,·;S) и ω(0,·;S) — прямые решения
    на одной реализации; средние по узлам решётки.
    """
    if realizations < 2:
        raise ValidationError("Для оценки a в корректорной форме нужны хотя бы 2 реализации")
    stage = as_stage(streams, 'a_corrector')
    d = field_spec.dimension
    window = field_spec.covering_window(-S, T)

    def one(i: int) -> Tuple[float, float]:
        field_ = field_spec.sample(window, realization_seed(stage, i))
        grid = Grid.for_field(field_, cfl_fraction)
        phi = solve_phi_T(field_, T, 0.0, beta, lam, grid)
        psi, omega = solve_omega(field_, S, 0.0, beta, lam, grid)
        div = grid.divergence([w.values for w in omega])
        return float(np.mean(phi.values * div)), float(np.mean(phi.values * psi.values))

    pairs = map_items(one, list(range(realizations)))
    num = np.array([p[0] for p in pairs])
    den = np.array([p[1] for p in pairs])
    if np.any(den <= 0):
        raise StatisticalGuardError("Неположительное E[ΦΨ] на реализации: нарушена положительность решателя")
    ratio, den_est = ratio_estimate(num, den, (stage.describe(),))
    if den_est.stderr > 0 and den_est.value <= k * den_est.stderr:
        raise StatisticalGuardError(
            f"Знаменатель E[ΦΨ]={den_est.value:.4g} в пределах {k} ст. ошибок от нуля"
        )
    return Estimate(1.0 + 2.0 / d * ratio.value, 2.0 / d * ratio.stderr, realizations, ratio.seeds)


@dataclass(frozen=True)
class CbarReport:
    """
    c̄ двумя путями: e^{α̂_∞} из калибровки и среднее Ψ(0,·;S) по решётке
    """

    calibration_route: Estimate
    grid_route: Estimate
    z: float
    S: float

    def to_dict(self) -> Dict:
        return {
            'calibration_route': self.calibration_route.to_dict(),
            'grid_route': self.grid_route.to_dict(),
            'z': self.z,
            'S': self.S,
        }


def estimate_cbar(field_spec: FieldSpec, beta: float, calibration: LambdaCalibration, S: float,
                  realizations: int, streams, cfl_fraction: float = 1.0,
                  strict: bool = True, k: float = 4.0) -> CbarReport:
    """
    Сравнение двух оценок c̄ = EΨ̃ = e^{α_∞}

    Args:
        field_spec: спецификация поля
        beta: сила потенциала
        calibration: результат калибровки λ, α_∞
        S: длина прогрева для Ψ(0,·;S)
        realizations: число реализаций поля
        streams: источник случайности
        strict: падать при расхождении больше k ст. ошибок

    Returns:
        CbarReport
    """
    stage = as_stage(streams, 'cbar')
    alpha = calibration.alpha_inf
    c_bar = float(np.exp(alpha.value))
    route1 = Estimate(c_bar, c_bar * alpha.stderr, alpha.n, alpha.seeds)
    window = field_spec.covering_window(-S, 0.0)

    def one(i: int) -> float:
        field_ = field_spec.sample(window, realization_seed(stage, i))
        grid = Grid.for_field(field_, cfl_fraction)
        return solve_psi_S(field_, S, 0.0, beta, calibration.lam.value, grid).mean()

    means = np.array(map_items(one, list(range(realizations))))
    route2 = Estimate.sample_mean(means, (stage.describe(),))
    z = z_score(route1, route2)
    logger.info(f"c̄: калибровка {route1.value:.5g}±{route1.stderr:.2g}, решётка {route2.value:.5g}±{route2.stderr:.2g}, z={z:.2f}")
    if strict and z > k:
        raise StatisticalGuardError(f"Оценки c̄ расходятся: z={z:.2f} > {k} (калибровка не сошлась)")
    return CbarReport(route1, route2, z, S)


@dataclass(frozen=True)
class StationaryCovariance:
    """
    Таблица Cov(Ψ̃(0,y), Ψ̃(0,ỹ)) по разнесениям с jackknife-репликами
    """

    separations: Tuple[float, ...]
    estimates: Tuple[Estimate, ...]
    replicates: np.ndarray
    S: float
    decay_guard: float

    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.estimates])

    def ratio(self, r: float, r2: float) -> Estimate:
        """Cov(r)/Cov(r2) с ошибкой по репликам"""
        i, j = self.separations.index(r), self.separations.index(r2)
        value = self.estimates[i].value / self.estimates[j].value
        stderr = float(jackknife_stderr(self.replicates[:, i] / self.replicates[:, j]))
        return Estimate(value, stderr, self.estimates[i].n)

    def to_rows(self) -> List[Dict]:
        return [{'separation': r, 'cov': e.value, 'stderr': e.stderr, 'n': e.n}
                for r, e in zip(self.separations, self.estimates)]


def pair_covariance(paths: PathBatch, paths_t: PathBatch, covariance, beta: float, lam: float,
                    separations: Sequence[float], S: float,
                    ess_floor: float = ESS_FLOOR) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Ковариация по двум ансамблям путей на [0, S]: значения, ошибки и jackknife-реплики

    Перекрытие берётся в обоих порядках (сдвигается то первый, то второй путь),
    поэтому результат не меняется при перестановке ансамблей.
    """
    ens, ens_t = tilt(paths, covariance, beta, (0.0, S)), tilt(paths_t, covariance, beta, (0.0, S))
    pair = ens.combined(ens_t)
    if pair.ess < ess_floor:
        raise StatisticalGuardError(f"Вырожденные веса пар: ESS={pair.ess:.2f}")

    d = paths.dimension
    pos, pos_t = paths.segment(0.0, S), paths_t.segment(0.0, S)
    forward, backward = [], []
    for r in separations:
        shift = np.zeros(d)
        shift[0] = r
        forward.append(overlap_R((0.0, S), (0.0, S), pos, pos_t + shift, covariance, paths.dt))
        backward.append(overlap_R((0.0, S), (0.0, S), pos_t, pos + shift, covariance, paths.dt))
    forward, backward = np.stack(forward, axis=1), np.stack(backward, axis=1)
    log_w = pair.log_weights
    la, lb = ens.log_weights, ens_t.log_weights

    def statistic(keep: np.ndarray) -> np.ndarray:
        count = np.count_nonzero(keep)
        two_alpha = (logsumexp(la[keep]) + logsumexp(lb[keep]) - 2.0 * np.log(count) - 2.0 * lam * S)
        w = np.exp(log_w[keep] - np.max(log_w[keep]))
        both = w @ np.exp(beta ** 2 * forward[keep]) + w @ np.exp(beta ** 2 * backward[keep])
        return np.exp(two_alpha) * (0.5 * both / np.sum(w) - 1.0)

    return grouped_jackknife(statistic, len(paths))


def stationary_covariance(field_spec: FieldSpec, beta: float, lam: float,
                          separations: Sequence[float], S: float, n: int, streams,
                          dt: float = DEFAULT_DT, ess_floor: float = ESS_FLOOR) -> StationaryCovariance:
    """
    Cov(Ψ(0,y;S), Ψ(0,ỹ;S)) = e^{2α_S}(Ê⊗Ê exp{β²ℛ_{S,S}} − 1) по разнесениям |y − ỹ|

    Для всех разнесений используются одни и те же два ансамбля путей;
    ковариация симметризована по их порядку (см. pair_covariance).
    """
    if S < 8.0 - 1e-12:
        raise ValidationError(f"Горизонт S={S} слишком мал для стационарной ковариации (нужно ≥ 8)")
    separations = tuple(float(r) for r in separations)
    if any(r < 0 or r > field_spec.box / 2 for r in separations):
        raise ValidationError(f"Разнесения должны лежать в [0, L/2={field_spec.box / 2}]")
    stage = as_stage(streams, 'stationary')
    d = field_spec.dimension
    decay_guard = S ** -(d / 2.0 - 1.0)

    if beta == 0.0:
        zero = tuple(Estimate(0.0, 0.0, n, (stage.describe(),)) for _ in separations)
        return StationaryCovariance(separations, zero, np.zeros((2, len(separations))), S, decay_guard)

    far = [r for r in separations if r * r > S]
    if far:
        logger.warning(f"Разнесения {far} больше √S={np.sqrt(S):.3g}: пути за время S их почти не связывают")

    paths = sample_ensemble(n, np.zeros(d), S, 0.0, dt, stage.child('a'))
    paths_t = sample_ensemble(n, np.zeros(d), S, 0.0, dt, stage.child('b'))
    full, stderr, replicates = pair_covariance(paths, paths_t, field_spec.covariance, beta, lam,
                                               separations, S, ess_floor)
    estimates = tuple(Estimate(float(v), float(e), n, (stage.describe(),)) for v, e in zip(full, stderr))
    for r, e in zip(separations, estimates):
        if e.value > 0 and decay_guard > 0.1 * e.value:
            logger.warning(f"Масштаб сходимости S^(−d/2+1)={decay_guard:.3g} больше 10% ковариации {e.value:.3g} при r={r}")
    return StationaryCovariance(separations, estimates, replicates, S, decay_guard)


def stationary_covariance_grid(field_spec: FieldSpec, beta: float, lam: float,
                               separations: Sequence[float], S: float, realizations: int,
                               streams, cfl_fraction: float = 1.0) -> List[Estimate]:
    """
    Та же ковариация по произведениям решёточных значений Ψ(0,·;S) вдоль осей
    """
    stage = as_stage(streams, 'stationary_grid')
    window = field_spec.covering_window(-S, 0.0)
    shifts = []
    for r in separations:
        steps = r / field_spec.h_x
        if abs(steps - round(steps)) > 1e-9:
            raise ValidationError(f"Разнесение {r} не кратно шагу решётки {field_spec.h_x}")
        shifts.append(int(round(steps)))

    def one(i: int) -> np.ndarray:
        field_ = field_spec.sample(window, realization_seed(stage, i))
        grid = Grid.for_field(field_, cfl_fraction)
        psi = solve_psi_S(field_, S, 0.0, beta, lam, grid).values
        mean = np.mean(psi)
        out = []
        for shift in shifts:
            products = [np.mean(psi * np.roll(psi, shift, axis=k)) for k in range(grid.dimension)]
            out.append(float(np.mean(products)) - mean ** 2)
        return np.array(out)

    rows = np.stack(map_items(one, list(range(realizations))))
    return [Estimate.sample_mean(rows[:, j], (stage.describe(),)) for j in range(len(shifts))]


@dataclass(frozen=True)
class DecayReport:
    """
    E(Ψ(0,y;2S₁) − Ψ(0,y;S₁))² по S₁ и наклон в log–log
    """

    s1_grid: Tuple[float, ...]
    estimates: Tuple[Estimate, ...]
    fit: Optional[LinearFit]

    def to_rows(self) -> List[Dict]:
        return [{'S1': s, 'S2': 2 * s, 'mean_sq_diff': e.value, 'stderr': e.stderr, 'n': e.n}
                for s, e in zip(self.s1_grid, self.estimates)]

    def to_dict(self) -> Dict:
        return {
            'rows': self.to_rows(),
            'fit': None if self.fit is None else self.fit.to_dict(),
        }


def psi_decay(field_spec: FieldSpec, beta: float, lam: float, s1_grid: Sequence[float],
              realizations: int, streams, cfl_fraction: float = 1.0) -> DecayReport:
    """
    Эксперимент с удвоением: Ψ(0,·;S₂), S₂ = 2S₁, против Ψ(0,·;S₁) на одной реализации
    """
    s1_grid = tuple(sorted(float(s) for s in s1_grid))
    stage = as_stage(streams, 'decay')
    horizons = sorted(set(s1_grid) | {2.0 * s for s in s1_grid})
    window = field_spec.covering_window(-horizons[-1], 0.0)

    def one(i: int) -> np.ndarray:
        field_ = field_spec.sample(window, realization_seed(stage, i))
        grid = Grid.for_field(field_, cfl_fraction)
        psi = {S: solve_psi_S(field_, S, 0.0, beta, lam, grid).values for S in horizons}
        return np.array([np.mean((psi[2.0 * s] - psi[s]) ** 2) for s in s1_grid])

    rows = np.stack(map_items(one, list(range(realizations))))
    estimates = tuple(Estimate.sample_mean(rows[:, j], (stage.describe(),)) for j in range(len(s1_grid)))
    fit = None
    if len(s1_grid) >= 2 and all(e.value > 0 for e in estimates):
        fit = loglog_fit(s1_grid, [e.value for e in estimates])
        logger.info(f"Наклон затухания: {fit.slope:.3f}±{fit.slope_stderr:.2g}")
    return DecayReport(s1_grid, estimates, fit)


@dataclass(frozen=True)
class DiffusivityReport:
    """
    Все оценки a с попарными z-оценками
    """

    a_msd: Estimate
    a_ST: Estimate
    a_corrector_form: Optional[Estimate] = None
    a_regen: Optional[RegenDiffusivity] = None
    a_ST_doubled: Optional[Estimate] = None
    S: float = 0.0
    T: float = 0.0
    gamma_reg: float = 0.0
    z_scores: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            'a_msd': self.a_msd.to_dict(),
            'a_ST': self.a_ST.to_dict(),
            'a_corrector_form': optional_dict(self.a_corrector_form),
            'a_regen': None if self.a_regen is None else self.a_regen.to_dict(),
            'a_ST_doubled': optional_dict(self.a_ST_doubled),
            'S': self.S,
            'T': self.T,
            'gamma_reg': self.gamma_reg,
            'z_scores': dict(self.z_scores),
        }


def diffusivity_report(a_msd: Estimate, a_ST: Estimate,
                       a_corrector_form: Optional[Estimate] = None,
                       a_regen: Optional[RegenDiffusivity] = None,
                       a_ST_doubled: Optional[Estimate] = None,
                       S: float = 0.0, T: float = 0.0, gamma_reg: float = 0.0) -> DiffusivityReport:
    """
    Сборка отчёта о диффузии с матрицей согласия
    """
    named = {'a_msd': a_msd, 'a_ST': a_ST}
    if a_corrector_form is not None:
        named['a_corrector_form'] = a_corrector_form
    if a_regen is not None:
        named['a_regen'] = a_regen.estimate
    z = pairwise_z_scores(named)
    if a_ST_doubled is not None:
        z['a_ST|a_ST_doubled'] = z_score(a_ST, a_ST_doubled)
    worst = max(z.values(), default=0.0)
    logger.info(f"Согласие оценок a: максимальная z-оценка {worst:.2f}")
    return DiffusivityReport(a_msd, a_ST, a_corrector_form, a_regen, a_ST_doubled, S, T, gamma_reg, z)
