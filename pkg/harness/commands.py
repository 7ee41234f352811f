"""
Команды экспериментов: каждая собирает этапы из вычислительных модулей,
пишет CSV/JSON и возвращает словарь результата
"""

import logging
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from she_core.errors import StatisticalGuardError
from she_core.fk_engine import LambdaCalibration, calibrate_lambda, sample_ensemble, tilt
from she_core.markov_chain import (chain_records, estimate_a_msd, estimate_a_regen, estimate_kappa,
                                   hitting_table)
from she_core.random_field import FieldSpec
from homogenization.corrector import strong_error, weak_error
from homogenization.homogenize import (diffusivity_report, estimate_a_corrector_form, estimate_a_ST,
                                       estimate_cbar, psi_decay)
from homogenization.noise_strength import estimate_nu2
from homogenization.profiles import Homogenized, gaussian_test_function, make_profile

from .config import ExperimentConfig
from .manifest import RunManifest
from .reports import write_csv, write_json
from .stages import StageRunner

logger = logging.getLogger(__name__)

ERROR_COLUMNS = ('epsilon', 'gamma', 'statistic', 'stderr', 'n', 'fit_rate', 'fit_residual')
HITTING_COLUMNS = ('separation', 'start_time', 'probability', 'stderr', 'truncation_bound', 'n')
COVARIANCE_COLUMNS = ('separation', 'cov', 'stderr', 'n')


@dataclass
class RunContext:
    """
    Всё, что нужно команде: конфигурация, манифест и исполнитель этапов
    """

    config: ExperimentConfig
    manifest: RunManifest
    runner: StageRunner

    @property
    def out_dir(self) -> Path:
        return self.manifest.out_dir

    @property
    def field_spec(self) -> FieldSpec:
        return self.config.field_spec()

    def header(self) -> Dict[str, Any]:
        """Общая шапка JSON-отчётов: спецификация поля и параметры модели"""
        return {
            'field': self.field_spec.to_dict(),
            'model': self.config.section('model'),
            'seed': self.config.seed,
        }

    def csv(self, name: str, rows: Sequence[Dict], columns: Optional[Sequence[str]] = None) -> Path:
        return self.manifest.add_output(write_csv(self.out_dir / name, rows, columns))

    def json(self, name: str, payload: Dict) -> Path:
        body = dict(self.header())
        body.update(payload)
        return self.manifest.add_output(write_json(self.out_dir / name, body))


def _calibration(ctx: RunContext, write: bool = False) -> LambdaCalibration:
    paths, tol = ctx.config.section('paths'), ctx.config.section('tolerances')
    beta = ctx.config.section('model')['beta']
    calibration = ctx.runner.run('calibrate', lambda st: calibrate_lambda(
        beta, ctx.field_spec, paths['s_grid'], paths['n_calibration'], st, paths['dt'],
        tol['residual_max'], tol['ess_floor']))
    if write:
        ctx.json('calibration.json', calibration.to_dict())
        ctx.csv('calibration_log_z.csv', calibration.table_rows())
    return calibration


def cmd_calibrate(ctx: RunContext) -> Dict:
    """
    Калибровка λ и α_∞: JSON с результатом и CSV log Z_s по s
    """
    calibration = _calibration(ctx, write=True)
    k = ctx.config.section('tolerances')['k_se']
    result = {'success': True, 'lambda': calibration.lam.value, 'alpha_inf': calibration.alpha_inf.value}
    if ctx.config.white_in_time and calibration.beta:
        expected = 0.5 * calibration.beta ** 2 * ctx.field_spec.covariance.space_at_zero()
        result['lambda_closed_form'] = expected
        if not calibration.lam.within(expected, k):
            logger.warning(f"λ̂={calibration.lam.value:.5g} не согласуется с ½β²R(0)={expected:.5g}")
        if not calibration.alpha_inf.within(0.0, k):
            logger.warning(f"α̂_∞={calibration.alpha_inf.value:.4g} заметно отличается от 0 в белом режиме")
    return result


def cmd_diffusivity(ctx: RunContext) -> Dict:
    """
    Все оценки эффективной диффузии и матрица их согласия
    """
    cfg = ctx.config
    paths, diff, tol = cfg.section('paths'), cfg.section('diffusivity'), cfg.section('tolerances')
    field_cfg = cfg.section('field')
    beta = cfg.section('model')['beta']
    spec = ctx.field_spec
    d = spec.dimension
    calibration = _calibration(ctx)
    lam = calibration.lam.value
    S, T = diff['S'], diff['T']
    mode = 'white' if cfg.white_in_time else 'colored'

    ensemble_paths = ctx.runner.run('paths', lambda st: sample_ensemble(
        paths['n_diffusivity'], np.zeros(d), T, 0.0, paths['dt'], st))
    a_msd = ctx.runner.run('a_msd', lambda st: estimate_a_msd(
        spec, beta, lam, T, paths['n_diffusivity'], st, paths['dt'], tol['ess_floor'], ensemble_paths))

    def regen(st):
        records = chain_records(ensemble_paths, T, mode, st, diff['kappa1'])
        weights = tilt(ensemble_paths, spec.covariance, beta, (0.0, T)).weights()
        return records, estimate_a_regen(records, weights)

    records, a_regen = ctx.runner.run('a_regen', regen)
    kappa = None
    try:
        kappa = estimate_kappa(records, tol['k_se'])
    except StatisticalGuardError as e:
        logger.warning(f"κ не оценены: {e}")

    a_ST = ctx.runner.run('a_ST', lambda st: estimate_a_ST(
        spec, beta, lam, S, T, diff['gamma_reg'], paths['n_diffusivity'], st, paths['dt'], tol['ess_floor']))
    a_corr = ctx.runner.run('a_corrector_form', lambda st: estimate_a_corrector_form(
        spec, beta, lam, S, T, diff['realizations'], st, field_cfg['cfl_fraction'], tol['k_se']))
    a_doubled = None
    if diff['doubled']:
        a_doubled = ctx.runner.run('a_ST_doubled', lambda st: estimate_a_ST(
            spec, beta, lam, 2 * S, 2 * T, diff['gamma_reg'], paths['n_diffusivity'], st,
            paths['dt'], tol['ess_floor']))

    report = diffusivity_report(a_msd, a_ST, a_corr, a_regen, a_doubled, S, T, diff['gamma_reg'])
    payload = report.to_dict()
    payload['kappa'] = None if kappa is None else kappa.to_dict()
    payload['lambda'] = calibration.lam.to_dict()
    ctx.json('diffusivity.json', payload)
    worst = max(report.z_scores.values(), default=0.0)
    return {'success': True, 'max_z': worst, 'consistent': worst < tol['k_se']}


def cmd_stationary_decay(ctx: RunContext) -> Dict:
    """
    Эксперимент удвоения S₁ → 2S₁: CSV средних квадратов разностей и наклон
    """
    cfg = ctx.config
    st_cfg, tol = cfg.section('stationary'), cfg.section('tolerances')
    beta = cfg.section('model')['beta']
    calibration = _calibration(ctx)
    report = ctx.runner.run('decay', lambda st: psi_decay(
        ctx.field_spec, beta, calibration.lam.value, st_cfg['s1_grid'], st_cfg['realizations'], st,
        cfg.section('field')['cfl_fraction']))
    ctx.csv('decay.csv', report.to_rows(), ('S1', 'S2', 'mean_sq_diff', 'stderr', 'n'))
    payload = report.to_dict()
    passed = report.fit is not None and report.fit.slope <= tol['decay_slope_max']
    payload['slope_threshold'] = tol['decay_slope_max']
    payload['passed'] = passed
    ctx.json('decay.json', payload)
    return {'success': True, 'slope': None if report.fit is None else report.fit.slope, 'passed': passed}


def hitting_ratios(rows, dimension: int, tolerance: float = 0.3) -> List[Dict]:
    """
    P(r)/P(2r) для всех пар разнесений из таблицы при одном моменте старта;
    passed: отношение в пределах доли tolerance от 2^{d−2}
    """
    by_key = {(row.start_time, row.separation): row.estimate for row in rows}
    expected = 2.0 ** (dimension - 2)
    ratios = []
    for (s, r), est in sorted(by_key.items()):
        far = by_key.get((s, 2 * r))
        if far is None or far.value <= 0:
            continue
        ratio = est.value / far.value
        stderr = ratio * float(np.hypot(est.stderr / est.value if est.value else 0.0, far.stderr / far.value))
        ratios.append({'start_time': s, 'separation': r, 'ratio': ratio, 'stderr': stderr,
                       'expected': expected, 'passed': abs(ratio - expected) <= tolerance * expected})
    return ratios


def truncation_checks(rows, fraction: float = 0.1) -> List[Dict]:
    """Хвост усечения против доли fraction измеренной вероятности; при P = 0 проверка не пройдена"""
    return [{'start_time': row.start_time, 'separation': row.separation,
             'probability': row.estimate.value, 'truncation_bound': row.truncation_bound,
             'passed': row.estimate.value > 0 and row.truncation_bound <= fraction * row.estimate.value}
            for row in rows]


def cmd_hitting(ctx: RunContext) -> Dict:
    """
    Таблица вероятностей сближения пар путей и проверка P(r)/P(2r) ≈ 2^{d−2}
    """
    cfg = ctx.config
    hit, beta = cfg.section('hitting'), cfg.section('model')['beta']
    tol = cfg.section('tolerances')
    spec = ctx.field_spec
    rows = ctx.runner.run('hitting', lambda st: hitting_table(
        hit['separations'], hit['start_times'], hit['horizon'], cfg.section('paths')['n_pairs'],
        hit['mode'], st, spec.dimension, beta, spec.covariance, hit['dt'],
        tol['truncation_fraction'], partial(ctx.runner.progress, 'hitting')))
    ctx.csv('hitting.csv', [row.to_row() for row in rows], HITTING_COLUMNS)
    ratios = hitting_ratios(rows, spec.dimension, tol['ratio_tolerance'])
    truncation = truncation_checks(rows, tol['truncation_fraction'])
    ratios_passed = bool(ratios) and all(r['passed'] for r in ratios)
    truncation_passed = all(t['passed'] for t in truncation)
    if not ratios_passed:
        logger.warning(f"P(r)/P(2r) вне {tol['ratio_tolerance']:.0%} от {2.0 ** (spec.dimension - 2):g}")
    if not truncation_passed:
        logger.warning(f"Хвост усечения больше {tol['truncation_fraction']:.0%} вероятности: увеличьте HIT_HORIZON")
    passed = ratios_passed and truncation_passed
    ctx.json('hitting.json', {
        'mode': hit['mode'],
        'horizon': hit['horizon'],
        'ratios': ratios,
        'ratio_tolerance': tol['ratio_tolerance'],
        'ratios_passed': ratios_passed,
        'truncation': truncation,
        'truncation_fraction': tol['truncation_fraction'],
        'truncation_passed': truncation_passed,
        'passed': passed,
    })
    return {'success': True, 'rows': len(rows), 'ratios': ratios, 'passed': passed}


def cmd_noise(ctx: RunContext) -> Dict:
    """
    ν² по формуле через ковариацию и по дисперсии предельного поля
    """
    cfg = ctx.config
    model, paths, tol = cfg.section('model'), cfg.section('paths'), cfg.section('tolerances')
    noise, st_cfg = cfg.section('noise'), cfg.section('stationary')
    spec = ctx.field_spec
    calibration = _calibration(ctx)
    g = gaussian_test_function(model['g_sigma'], spec.dimension)
    report = ctx.runner.run('noise', lambda st: estimate_nu2(
        spec, model['beta'], calibration, model['a'], g, noise['eps_grid'], st_cfg['S'],
        paths['n_pairs'], st, st_cfg['separations'], noise['grid_realizations'], paths['dt'],
        cfg.section('field')['cfl_fraction'], tol['ess_floor']))
    ctx.csv('noise.csv', report.to_rows())
    ctx.csv('stationary_covariance.csv', report.covariance.to_rows(), COVARIANCE_COLUMNS)
    ctx.json('noise.json', report.to_dict())
    result = {'success': True, 'nu2_formula': report.nu2_formula.value,
              'nu2_ew': None if report.nu2_ew is None else report.nu2_ew.value,
              'relative_gap': report.relative_gap}
    if noise['grid_realizations'] >= 2:
        cbar = ctx.runner.run('cbar', lambda st: estimate_cbar(
            spec, model['beta'], calibration, st_cfg['S'], noise['grid_realizations'], st,
            cfg.section('field')['cfl_fraction'], strict=False, k=tol['k_se']))
        if cbar.z > tol['k_se']:
            logger.warning(f"c̄: две оценки расходятся, z={cbar.z:.2f} > {tol['k_se']}")
        ctx.json('cbar.json', cbar.to_dict())
        result['c_bar'] = cbar.calibration_route.value
        result['c_bar_z'] = cbar.z
    return result


def homogenized_from(config: ExperimentConfig) -> Homogenized:
    model = config.section('model')
    d = config.section('field')['dimension']
    u0 = make_profile(model['u0'], d, model['u0_sigma'], model['u0_amplitude'])
    return Homogenized(u0, model['a'])


def cmd_converge(ctx: RunContext, kind: str = 'strong') -> Dict:
    """
    Строгая или слабая ошибка приближения по сетке ε
    """
    cfg = ctx.config
    model, conv, tol = cfg.section('model'), cfg.section('converge'), cfg.section('tolerances')
    cfl = cfg.section('field')['cfl_fraction']
    spec = ctx.field_spec
    calibration = _calibration(ctx)
    ubar = homogenized_from(cfg)
    realizations = conv['realizations']
    fit = realizations >= 20

    if kind == 'strong':
        report = ctx.runner.run('strong', lambda st: strong_error(
            spec, model['beta'], calibration.lam.value, ubar, model['t'], conv['probes'],
            conv['eps_strong'], realizations, st, cfl, tol['wrap_tolerance'], fit,
            partial(ctx.runner.progress, 'strong')))
        verdict = report.decreasing(tol['k_se'])
    else:
        g = gaussian_test_function(model['g_sigma'], spec.dimension)
        report = ctx.runner.run('weak', lambda st: weak_error(
            spec, model['beta'], calibration.lam.value, ubar, g, model['t'], model['gamma'],
            conv['eps_weak'], realizations, st, cfl, tol['wrap_tolerance'], cfg.memory_budget(), fit,
            partial(ctx.runner.progress, 'weak')))
        verdict = report.fit is not None and report.fit.slope >= tol['weak_rate_min']

    ctx.csv(f'{kind}_error.csv', report.to_rows(), ERROR_COLUMNS)
    payload = report.to_dict()
    payload['passed'] = verdict
    ctx.json(f'{kind}_error.json', payload)
    return {'success': True, 'kind': kind, 'passed': verdict,
            'fit_rate': None if report.fit is None else report.fit.slope}


COMMANDS: Dict[str, Callable[[RunContext], Dict]] = {
    'calibrate': cmd_calibrate,
    'diffusivity': cmd_diffusivity,
    'stationary-decay': cmd_stationary_decay,
    'hitting': cmd_hitting,
    'noise': cmd_noise,
    'converge-strong': partial(cmd_converge, kind='strong'),
    'converge-weak': partial(cmd_converge, kind='weak'),
}
