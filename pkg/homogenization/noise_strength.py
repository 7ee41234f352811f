"""
Эффективная сила шума ν² предельного уравнения Эдвардса–Уилкинсона

Два пути:
- формула через ковариацию стационарного решения: числитель
  ε^{−(d−2)}∬g g Cov(Ψ̃(0,x/ε), Ψ̃(0,x̃/ε)) по таблице ковариации
  с экстраполяцией ε → 0, знаменатель c·β²·e^{2α_∞}·∬g g|x−x̃|^{−(d−2)};
- дисперсия ε^{−d/2+1}e^{−α}∫gΨ^ε по решёточным реализациям, делённая
  на β²∫_0^∞∫|ḡ|² в замкнутом виде.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from she_core.errors import StatisticalGuardError, ValidationError
from she_core.estimates import Estimate, grouped_jackknife, jackknife_stderr, linear_fit
from she_core.fk_engine import DEFAULT_DT, ESS_FLOOR, LambdaCalibration
from she_core.grid_pde import Grid, solve_psi_S
from she_core.parallel import map_items
from she_core.random_field import FieldSpec, sphere_area
from she_core.rng import as_stage

from .homogenize import StationaryCovariance, constant_c, realization_seed, stationary_covariance
from .profiles import GaussianProfile

logger = logging.getLogger(__name__)

QUAD_OPTIONS = {'epsabs': 0.0, 'epsrel': 1e-10, 'limit': 400}


def _require_gaussian(g) -> GaussianProfile:
    if not isinstance(g, GaussianProfile):
        raise ValidationError("Замкнутые формулы для g реализованы только для гауссова профиля")
    return g


def autocorrelation_g(g: GaussianProfile, r) -> np.ndarray:
    """
    A_g(z) = ∫g(x)g(x+z)dx = A²(πσ²)^{d/2}·exp{−|z|²/(4σ²)} (обрезка g не учитывается)
    """
    r = np.asarray(r, dtype=float)
    d = g.dimension
    return g.amplitude ** 2 * (np.pi * g.sigma ** 2) ** (d / 2.0) * np.exp(-r ** 2 / (4.0 * g.sigma ** 2))


def riesz_integral(g: GaussianProfile) -> float:
    """
    ∬g(x)g(x̃)|x − x̃|^{−(d−2)} радиальной квадратурой по разности

    После перехода к z = x − x̃ в полярных координатах особенность
    сокращается с якобианом: ω_d∫A_g(r)·r dr.
    """
    g = _require_gaussian(g)
    scale = 2.0 * g.sigma
    value, _ = integrate.quad(lambda r: autocorrelation_g(g, r) * r, 0.0, 40.0 * scale, **QUAD_OPTIONS)
    if not np.isfinite(value) or value <= 0:
        raise StatisticalGuardError(f"Квадратура интеграла Рисса не сошлась: {value}")
    return float(sphere_area(g.dimension) * value)


def riesz_integral_mc(g: GaussianProfile, n: int, rng: np.random.Generator) -> Estimate:
    """
    Монте-Карло оценка того же интеграла: (∫g)²·E|X − X̃|^{−(d−2)}, X, X̃ ~ g/∫g
    """
    g = _require_gaussian(g)
    d = g.dimension
    x = rng.standard_normal((n, d)) * g.sigma
    x_t = rng.standard_normal((n, d)) * g.sigma
    values = np.linalg.norm(x - x_t, axis=1) ** -(d - 2.0)
    return Estimate.sample_mean(values).scaled(g.integral() ** 2)


def ew_variance_integral(g: GaussianProfile, a: float) -> float:
    """
    ∫_0^∞∫|ḡ(r,x)|²dx dr = A²π^{d/2}σ^{2d}·σ^{2−d}/(a(d/2 − 1)), ḡ = G_a(r)∗g
    """
    g = _require_gaussian(g)
    if a <= 0:
        raise ValidationError(f"Диффузия должна быть положительной, получено a={a}")
    d = g.dimension
    s = g.sigma
    return float(g.amplitude ** 2 * np.pi ** (d / 2.0) * s ** (2 * d) * s ** (2.0 - d) / (a * (d / 2.0 - 1.0)))


def _tail_constant(separations: np.ndarray, values: np.ndarray, d: int) -> float:
    """K в хвосте Cov(r) ≈ K/r^{d−2} по двум наибольшим разнесениям"""
    top = np.argsort(separations)[-2:]
    return float(np.mean(values[top] * separations[top] ** (d - 2.0)))


def rescaled_numerator(g: GaussianProfile, eps: float, separations: Sequence[float],
                       values: Sequence[float]) -> float:
    """
    ε^{−(d−2)}∫A_g(z)Cov(|z|/ε)dz = ε²ω_d∫A_g(εr)Cov(r)r^{d−1}dr

    Cov кусочно-линейна по таблице до наибольшего разнесения и имеет
    хвост K/r^{d−2} дальше.
    """
    d = g.dimension
    sep = np.asarray(separations, dtype=float)
    vals = np.asarray(values, dtype=float)
    order = np.argsort(sep)
    sep, vals = sep[order], vals[order]
    r_max = sep[-1]
    tail = _tail_constant(sep, vals, d)

    def body(r: float) -> float:
        return autocorrelation_g(g, eps * r) * np.interp(r, sep, vals) * r ** (d - 1)

    inner, _ = integrate.quad(body, 0.0, r_max, points=list(sep[1:-1]), **QUAD_OPTIONS)
    far, _ = integrate.quad(lambda r: autocorrelation_g(g, eps * r) * tail * r, r_max, np.inf, **QUAD_OPTIONS)
    return float(eps ** 2 * sphere_area(d) * (inner + far))


@dataclass(frozen=True)
class NoiseReport:
    g: Dict
    eps_grid: Tuple[float, ...]
    numerators: Tuple[Estimate, ...]
    nu2_formula: Estimate
    c: float
    alpha_inf: float
    riesz: float
    ew_integral: float
    a: float
    beta: float
    nu2_ew: Optional[Estimate] = None
    ew_variances: Tuple[Estimate, ...] = ()
    covariance: Optional[StationaryCovariance] = None

    @property
    def relative_gap(self) -> Optional[float]:
        if self.nu2_ew is None or self.nu2_formula.value == 0:
            return None
        return abs(self.nu2_ew.value - self.nu2_formula.value) / abs(self.nu2_formula.value)

    def to_rows(self) -> List[Dict]:
        rows = []
        for i, eps in enumerate(self.eps_grid):
            row = {'epsilon': eps, 'numerator': self.numerators[i].value,
                   'numerator_stderr': self.numerators[i].stderr}
            if self.ew_variances:
                row['ew_variance'] = self.ew_variances[i].value
                row['ew_variance_stderr'] = self.ew_variances[i].stderr
            rows.append(row)
        return rows

    def to_dict(self) -> Dict:
        return {
            'g': self.g,
            'eps_grid': list(self.eps_grid),
            'nu2_formula': self.nu2_formula.to_dict(),
            'nu2_ew': None if self.nu2_ew is None else self.nu2_ew.to_dict(),
            'relative_gap': self.relative_gap,
            'c': self.c,
            'alpha_inf': self.alpha_inf,
            'riesz': self.riesz,
            'ew_integral': self.ew_integral,
            'a': self.a,
            'beta': self.beta,
            'rows': self.to_rows(),
            'covariance': None if self.covariance is None else self.covariance.to_rows(),
        }


def _check_eps_grid(eps_grid: Sequence[float]) -> Tuple[float, ...]:
    eps_grid = tuple(sorted(float(e) for e in eps_grid))
    if len(set(eps_grid)) < 2:
        raise ValidationError("Для экстраполяции ε → 0 нужны хотя бы два различных ε")
    if eps_grid[0] <= 0 or eps_grid[-1] >= 1:
        raise ValidationError(f"Значения ε должны лежать в (0, 1), получено {eps_grid}")
    return eps_grid


def numerator_from_table(g: GaussianProfile, eps_grid: Sequence[float],
                         table: StationaryCovariance) -> Tuple[Tuple[Estimate, ...], Estimate]:
    """
    Числители по сетке ε и их экстраполяция в ε = 0 с ошибкой по jackknife-репликам
    """
    eps = np.asarray(eps_grid)
    values = table.values()

    def curve(vals) -> np.ndarray:
        return np.array([rescaled_numerator(g, e, table.separations, vals) for e in eps])

    full = curve(values)
    reps = np.stack([curve(rep) for rep in table.replicates])
    per_eps_se = jackknife_stderr(reps)
    n = table.estimates[0].n
    per_eps = tuple(Estimate(float(v), float(s), n) for v, s in zip(full, per_eps_se))
    intercept = linear_fit(eps, full).intercept
    rep_intercepts = np.array([linear_fit(eps, r).intercept for r in reps])
    return per_eps, Estimate(float(intercept), float(jackknife_stderr(rep_intercepts)), n)


def ew_variances(field_spec: FieldSpec, beta: float, lam: float, alpha: float,
                 g: GaussianProfile, eps_grid: Sequence[float], S: float, realizations: int,
                 streams, cfl_fraction: float = 1.0) -> np.ndarray:
    """
    Значения X_ε = ε^{−d/2+1}e^{−α}(εh)^dΣ_y g(εy)Ψ(0,y;S) по реализациям, форма (n, len(ε))
    """
    stage = as_stage(streams, 'ew')
    window = field_spec.covering_window(-S, 0.0)
    d = field_spec.dimension
    radius = g.cutoff if g.cutoff is not None else 4.0 * g.sigma
    for eps in eps_grid:
        if radius / eps > field_spec.box / 2:
            raise ValidationError(
                f"Носитель g(ε·) радиуса {radius / eps:.3g} не помещается в половину бокса {field_spec.box / 2}"
            )

    def one(i: int) -> np.ndarray:
        field_ = field_spec.sample(window, realization_seed(stage, i))
        grid = Grid.for_field(field_, cfl_fraction)
        psi = solve_psi_S(field_, S, 0.0, beta, lam, grid).values
        mesh = grid.mesh()
        out = []
        for eps in eps_grid:
            integral = (eps * grid.h_x) ** d * np.sum(g.value(eps * mesh) * psi)
            out.append(eps ** (1.0 - d / 2.0) * np.exp(-alpha) * integral)
        return np.array(out)

    return np.stack(map_items(one, list(range(realizations))))


def estimate_nu2(field_spec: FieldSpec, beta: float, calibration: LambdaCalibration, a: float,
                 g: GaussianProfile, eps_grid: Sequence[float], S: float, n: int, streams,
                 separations: Sequence[float] = (0.0, 1.0, 2.0, 3.0, 4.0),
                 grid_realizations: int = 0, dt: float = DEFAULT_DT,
                 cfl_fraction: float = 1.0, ess_floor: float = ESS_FLOOR) -> NoiseReport:
    """
    ν² двумя путями

    Args:
        field_spec: спецификация поля
        beta: сила потенциала (> 0)
        calibration: калибровка λ, α_∞
        a: принятая эффективная диффузия
        g: тестовая функция
        eps_grid: сетка ε для экстраполяции
        S: длина прогрева
        n: число пар путей для таблицы ковариации
        streams: источник случайности
        separations: разнесения таблицы ковариации
        grid_realizations: число реализаций для второго пути (0 — не считать)

    Returns:
        NoiseReport
    """
    if beta <= 0:
        raise ValidationError("Оценка ν² требует β > 0 (при β = 0 отношение 0/β² не определено)")
    g = _require_gaussian(g)
    eps_grid = _check_eps_grid(eps_grid)
    d = field_spec.dimension
    stage = as_stage(streams, 'noise')
    c = constant_c(d)
    alpha = calibration.alpha_inf.value
    lam = calibration.lam.value
    riesz = riesz_integral(g)
    ew_integral = ew_variance_integral(g, a)
    logger.info(f"ν²: c={c:.6g}, Рисс={riesz:.6g}, ∫∫|ḡ|²={ew_integral:.6g}, c·Рисс/a={c * riesz / a:.6g}")

    table = stationary_covariance(field_spec, beta, lam, separations, S, n, stage.child('table'), dt, ess_floor)
    numerators, limit = numerator_from_table(g, eps_grid, table)
    denominator = c * beta ** 2 * np.exp(2.0 * alpha) * riesz
    nu2_formula = limit.scaled(a / denominator)

    nu2_ew = None
    variances: Tuple[Estimate, ...] = ()
    if grid_realizations >= 2:
        samples = ew_variances(field_spec, beta, lam, alpha, g, eps_grid, S, grid_realizations,
                               stage.child('grid'), cfl_fraction)
        eps = np.asarray(eps_grid)

        def var_curve(keep: np.ndarray) -> np.ndarray:
            return np.var(samples[keep], axis=0, ddof=1)

        def limit_of(keep: np.ndarray) -> np.ndarray:
            return np.array([linear_fit(eps, var_curve(keep)).intercept])

        full_var, var_se, _ = grouped_jackknife(var_curve, grid_realizations)
        variances = tuple(Estimate(float(v), float(s), grid_realizations) for v, s in zip(full_var, var_se))
        lim, lim_se, _ = grouped_jackknife(limit_of, grid_realizations)
        nu2_ew = Estimate(float(lim[0]), float(lim_se[0]), grid_realizations).scaled(1.0 / (beta ** 2 * ew_integral))

    report = NoiseReport(g.describe(), eps_grid, numerators, nu2_formula, c, alpha, riesz,
                         ew_integral, float(a), float(beta), nu2_ew, variances, table)
    if report.relative_gap is not None:
        logger.info(f"ν²: формула {nu2_formula.value:.5g}, ЭУ {nu2_ew.value:.5g}, расхождение {report.relative_gap:.1%}")
    return report
