"""
Конфигурация экспериментов

Порядок применения настроек: значения по умолчанию, файл KEY=value
(читается python-dotenv), переменные окружения с префиксом SHE_, флаги CLI.
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from dotenv import dotenv_values

from she_core.errors import ValidationError
from she_core.grid_pde import Grid, memory_estimate, wrap_guard
from she_core.markov_chain import MODES
from she_core.random_field import FieldSpec, KernelSpec, make_kernels
from she_core.rng import RandomStreams

logger = logging.getLogger(__name__)

ENV_PREFIX = 'SHE_'


def parse_floats(raw: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in str(raw).replace(' ', '').split(',') if v)


def parse_points(raw: str) -> Tuple[Tuple[float, ...], ...]:
    """'0,0,0; 0.5,0,0' -> ((0,0,0), (0.5,0,0))"""
    return tuple(parse_floats(chunk) for chunk in str(raw).split(';') if chunk.strip())


def parse_bool(raw: str) -> bool:
    return str(raw).strip().lower() in ('1', 'true', 'yes', 'on')


def _is_multiple(value: float, step: float) -> bool:
    count = value / step
    return abs(count - np.rint(count)) <= 1e-9 * max(1.0, abs(count))


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return '; '.join(format_value(p) for p in value)
    if isinstance(value, tuple):
        return ','.join(repr(float(v)) for v in value)
    return str(value)


# Ключ файла -> (раздел, имя, разбор, описание)
CONFIG_SCHEMA: Dict[str, Tuple[str, str, Callable[[str], Any], str]] = {
    'DIMENSION': ('field', 'dimension', int, 'Размерность пространства d ≥ 3'),
    'MODE': ('field', 'mode', str, 'Режим поля: colored или white'),
    'TIME_SUPPORT': ('field', 'time_support', float, 'Носитель временного ядра (≤ 1)'),
    'SPACE_RADIUS': ('field', 'space_radius', float, 'Радиус пространственного ядра (≤ 1/2)'),
    'KERNEL_DEGREE': ('field', 'degree', int, 'Степень гладкости ядер'),
    'BOX': ('field', 'box', float, 'Сторона периодического куба L'),
    'H_X': ('field', 'h_x', float, 'Шаг решётки по пространству'),
    'H_T': ('field', 'h_t', float, 'Шаг решётки поля по времени'),
    'CFL_FRACTION': ('field', 'cfl_fraction', float, 'Доля предела устойчивости h_x²/(2d) для шага решателя'),

    'BETA': ('model', 'beta', float, 'Сила потенциала β'),
    'A_EFF': ('model', 'a', float, 'Принятая эффективная диффузия a для ū'),
    'T_MACRO': ('model', 't', float, 'Макроскопическое время t'),
    'GAMMA': ('model', 'gamma', float, 'Показатель мезоскопических отрезков γ ∈ (1, 2)'),
    'U0': ('model', 'u0', str, 'Начальные данные: gaussian или constant'),
    'U0_SIGMA': ('model', 'u0_sigma', float, 'Ширина гауссовых начальных данных'),
    'U0_AMPLITUDE': ('model', 'u0_amplitude', float, 'Амплитуда (или значение) начальных данных'),
    'G_SIGMA': ('model', 'g_sigma', float, 'Ширина тестовой функции g'),

    'PATH_DT': ('paths', 'dt', float, 'Шаг дискретизации путей'),
    'CALIBRATION_S': ('paths', 's_grid', parse_floats, 'Сетка s для калибровки λ'),
    'CALIBRATION_PATHS': ('paths', 'n_calibration', int, 'Размер ансамбля калибровки'),
    'DIFFUSIVITY_PATHS': ('paths', 'n_diffusivity', int, 'Размер ансамблей для оценок a'),
    'PAIR_PATHS': ('paths', 'n_pairs', int, 'Число пар путей для ковариаций и сближений'),

    'S': ('diffusivity', 'S', float, 'Горизонт вперёд S'),
    'T': ('diffusivity', 'T', float, 'Горизонт назад T'),
    'GAMMA_REG': ('diffusivity', 'gamma_reg', float, 'Параметр регуляризации γ в a_{S,T;γ}'),
    'KAPPA1': ('diffusivity', 'kappa1', float, 'Вероятность регенерации в цветном режиме'),
    'REALIZATIONS': ('diffusivity', 'realizations', int, 'Число реализаций поля для сеточных оценок'),
    'DOUBLED': ('diffusivity', 'doubled', parse_bool, 'Считать ли a_{2S,2T} для проверки устойчивости'),

    'DECAY_S1': ('stationary', 's1_grid', parse_floats, 'Сетка S₁ эксперимента удвоения'),
    'DECAY_REALIZATIONS': ('stationary', 'realizations', int, 'Число реализаций в эксперименте удвоения'),
    'SEPARATIONS': ('stationary', 'separations', parse_floats, 'Разнесения таблицы ковариации'),
    'STATIONARY_S': ('stationary', 'S', float, 'Прогрев для стационарной ковариации'),

    'HIT_SEPARATIONS': ('hitting', 'separations', parse_floats, 'Начальные расстояния пар'),
    'HIT_START_TIMES': ('hitting', 'start_times', parse_floats, 'Моменты старта пар'),
    'HIT_HORIZON': ('hitting', 'horizon', float, 'Горизонт поиска сближения'),
    'HIT_MODE': ('hitting', 'mode', str, 'Режим сближения: white или colored'),
    'HIT_DT': ('hitting', 'dt', float, 'Шаг путей для сближений'),

    'NOISE_EPS': ('noise', 'eps_grid', parse_floats, 'Сетка ε для ν²'),
    'NOISE_REALIZATIONS': ('noise', 'grid_realizations', int, 'Реализации для пути через дисперсию ЭУ'),

    'STRONG_EPS': ('converge', 'eps_strong', parse_floats, 'Сетка ε для строгой ошибки'),
    'WEAK_EPS': ('converge', 'eps_weak', parse_floats, 'Сетка ε для слабой ошибки'),
    'CONVERGE_REALIZATIONS': ('converge', 'realizations', int, 'Реализаций поля на каждое ε'),
    'PROBES': ('converge', 'probes', parse_points, 'Макроскопические точки наблюдения (через ;)'),

    'K_SE': ('tolerances', 'k_se', float, 'Множитель стандартной ошибки в проверках'),
    'ESS_FLOOR': ('tolerances', 'ess_floor', float, 'Минимальный эффективный объём выборки'),
    'RESIDUAL_MAX': ('tolerances', 'residual_max', float, 'Допустимый остаток аффинной аппроксимации log Z_s'),
    'DECAY_SLOPE_MAX': ('tolerances', 'decay_slope_max', float, 'Порог наклона затухания'),
    'WEAK_RATE_MIN': ('tolerances', 'weak_rate_min', float, 'Минимальный показатель 2ζ̂'),
    'WRAP_TOLERANCE': ('tolerances', 'wrap_tolerance', float, 'Допустимая вероятность заворачивания'),
    'MEMORY_BUDGET_MB': ('tolerances', 'memory_budget_mb', float, 'Бюджет памяти на траекторию (МБ)'),
    'RATIO_TOLERANCE': ('tolerances', 'ratio_tolerance', float, 'Допустимое относительное отклонение P(r)/P(2r) от 2^{d−2}'),
    'TRUNCATION_FRACTION': ('tolerances', 'truncation_fraction', float, 'Допустимая доля хвоста усечения в вероятности сближения'),

    'SEED': ('run', 'seed', int, 'Корневой сид'),
    'THREADS': ('run', 'threads', int, 'Число рабочих потоков'),
    'BLOCK_SIZE': ('run', 'block_size', int, 'Размер блока потоков'),
    'OUT': ('run', 'out', str, 'Каталог результатов'),
}


class ExperimentConfig:
    """
    Класс для управления конфигурацией эксперимента
    """

    DEFAULT_CONFIG = {
        'field': {
            'dimension': 3,
            'mode': 'colored',
            'time_support': 1.0,
            'space_radius': 0.5,
            'degree': 4,
            'box': 16.0,
            'h_x': 0.25,
            'h_t': 0.25,
            'cfl_fraction': 1.0,
        },
        'model': {
            'beta': 0.2,
            'a': 1.0,
            't': 0.05,
            'gamma': 4.0 / 3.0,
            'u0': 'gaussian',
            'u0_sigma': 0.25,
            'u0_amplitude': 1.0,
            'g_sigma': 0.25,
        },
        'paths': {
            'dt': 0.05,
            's_grid': (4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0),
            'n_calibration': 4000,
            'n_diffusivity': 4000,
            'n_pairs': 2000,
        },
        'diffusivity': {
            'S': 8.0,
            'T': 8.0,
            'gamma_reg': 1.0,
            'kappa1': 0.5,
            'realizations': 8,
            'doubled': True,
        },
        'stationary': {
            's1_grid': (4.0, 8.0, 16.0),
            'realizations': 200,
            'separations': (0.0, 1.0, 2.0, 3.0, 4.0),
            'S': 16.0,
        },
        'hitting': {
            'separations': (4.0, 8.0),
            'start_times': (0.0,),
            'horizon': 64.0,
            'mode': 'white',
            'dt': 0.25,
        },
        'noise': {
            'eps_grid': (0.4, 0.3, 0.2),
            'grid_realizations': 50,
        },
        'converge': {
            'eps_strong': (0.4, 0.3, 0.2),
            'eps_weak': (0.4, 0.3, 0.2),
            'realizations': 50,
            'probes': ((0.0, 0.0, 0.0), (0.1, 0.0, 0.0)),
        },
        'tolerances': {
            'k_se': 4.0,
            'ess_floor': 10.0,
            'residual_max': 0.05,
            'decay_slope_max': -0.35,
            'weak_rate_min': 0.4,
            'wrap_tolerance': 1e-3,
            'memory_budget_mb': 2048.0,
            'ratio_tolerance': 0.3,
            'truncation_fraction': 0.1,
        },
        'run': {
            'seed': 0,
            'threads': 1,
            'block_size': 256,
            'out': 'runs/default',
        },
    }

    def __init__(self, config_file: Optional[Union[str, Path]] = None, use_env: bool = True):
        """
        Инициализация конфигурации

        Args:
            config_file: файл KEY=value (необязателен)
            use_env: применять ли переменные окружения SHE_*
        """
        self.config = copy.deepcopy(self.DEFAULT_CONFIG)
        self.source = None
        if config_file is not None:
            self.load_file(config_file)
        if use_env:
            self.load_from_env()

    def _apply(self, key: str, raw: str, origin: str):
        if key not in CONFIG_SCHEMA:
            raise ValidationError(f"Неизвестный ключ конфигурации '{key}' ({origin})")
        section, name, parse, _ = CONFIG_SCHEMA[key]
        try:
            self.config[section][name] = parse(raw)
        except (TypeError, ValueError) as e:
            raise ValidationError(f"Некорректное значение {key}={raw!r} ({origin}): {e}") from e

    def load_file(self, config_file: Union[str, Path]):
        """
        Загрузка файла KEY=value
        """
        path = Path(config_file)
        if not path.exists():
            raise ValidationError(f"Файл конфигурации {path} не найден")
        for key, raw in dotenv_values(path).items():
            if raw is None:
                raise ValidationError(f"Ключ {key} в {path} без значения")
            self._apply(key.upper(), raw, str(path))
        self.source = str(path)
        logger.info(f"Конфигурация загружена из {path}")

    def load_from_env(self):
        """
        Загрузка переопределений из переменных окружения SHE_<KEY>
        """
        for key in CONFIG_SCHEMA:
            raw = os.getenv(ENV_PREFIX + key)
            if raw is not None:
                self._apply(key, raw, 'окружение')
                logger.debug(f"Переопределено из окружения: {key}={raw}")

    def apply_overrides(self, seed: Optional[int] = None, threads: Optional[int] = None,
                        out: Optional[str] = None):
        """
        Переопределения из флагов CLI
        """
        if seed is not None:
            self.config['run']['seed'] = int(seed)
        if threads is not None:
            self.config['run']['threads'] = int(threads)
        if out is not None:
            self.config['run']['out'] = str(out)

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.config[name])

    @property
    def seed(self) -> int:
        return int(self.config['run']['seed'])

    @property
    def out_dir(self) -> Path:
        return Path(self.config['run']['out'])

    @property
    def white_in_time(self) -> bool:
        return self.config['field']['mode'] == 'white'

    def kernel(self) -> KernelSpec:
        f = self.config['field']
        return make_kernels(f['time_support'], f['space_radius'], f['degree'], f['dimension'])

    def field_spec(self) -> FieldSpec:
        f = self.config['field']
        return FieldSpec(self.kernel(), f['box'], f['h_x'], f['h_t'], self.white_in_time)

    def streams(self) -> RandomStreams:
        return RandomStreams(self.seed)

    def memory_budget(self) -> int:
        return int(self.config['tolerances']['memory_budget_mb'] * 1024 ** 2)

    def computational_items(self) -> Dict[str, Dict[str, Any]]:
        """
        Настройки, определяющие результаты (без каталога вывода и числа потоков)
        """
        items = copy.deepcopy(self.config)
        items['run'] = {'seed': self.config['run']['seed'], 'block_size': self.config['run']['block_size']}
        return items

    def config_hash(self) -> str:
        payload = json.dumps(self.to_file_dict(self.computational_items()), sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()

    @staticmethod
    def to_file_dict(config: Dict[str, Dict[str, Any]]) -> Dict[str, str]:
        flat = {}
        for key, (section, name, _, _) in CONFIG_SCHEMA.items():
            if name in config.get(section, {}):
                flat[key] = format_value(config[section][name])
        return flat

    def to_dict(self) -> Dict[str, str]:
        return self.to_file_dict(self.config)

    def create_config_template(self) -> str:
        """
        Создание шаблона файла конфигурации с описанием всех ключей

        Returns:
            Содержимое шаблона
        """
        lines = ["# Конфигурация эксперимента (KEY=value, # — комментарий)",
                 f"# Любой ключ можно переопределить переменной окружения {ENV_PREFIX}<KEY>"]
        current = None
        values = self.to_dict()
        for key, (section, _, _, description) in CONFIG_SCHEMA.items():
            if section != current:
                lines.append("")
                lines.append(f"# --- {section} ---")
                current = section
            lines.append(f"# {description}")
            lines.append(f"{key}={values[key]}")
        return "\n".join(lines) + "\n"

    def save_config_template(self, file_path: Optional[Union[str, Path]] = None) -> Path:
        """
        Сохранение шаблона конфигурации

        Args:
            file_path: путь для сохранения (по умолчанию configs/template.env)
        """
        if file_path is None:
            file_path = Path(__file__).parent.parent / 'configs' / 'template.env'
        path = Path(file_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.create_config_template())
        return path

    def validate_config(self, command: Optional[str] = None) -> Dict[str, Any]:
        """
        Валидация текущей конфигурации до начала вычислений

        Args:
            command: имя команды; проверки бокса и памяти для сеток ε
                выполняются только для команд, которые эти сетки используют
                (None — проверять всё)

        Returns:
            Результат валидации
        """
        issues: List[str] = []
        warnings: List[str] = []
        f, m, p = self.config['field'], self.config['model'], self.config['paths']
        tol, conv = self.config['tolerances'], self.config['converge']
        d = f['dimension']

        if f['mode'] not in MODES:
            issues.append(f"Режим поля должен быть одним из {MODES}, получено '{f['mode']}'")
        if self.config['hitting']['mode'] not in MODES:
            issues.append(f"Режим сближения должен быть одним из {MODES}")
        if tol['ratio_tolerance'] <= 0:
            issues.append(f"RATIO_TOLERANCE должна быть положительной, получено {tol['ratio_tolerance']}")
        if not 0 < tol['truncation_fraction'] < 1:
            issues.append(f"TRUNCATION_FRACTION должна лежать в (0, 1), получено {tol['truncation_fraction']}")
        if not 0 < f['cfl_fraction'] <= 1:
            issues.append(f"CFL_FRACTION должна лежать в (0, 1], получено {f['cfl_fraction']}")

        try:
            kernel = self.kernel()
        except ValidationError as e:
            issues.append(str(e))
            kernel = None

        if kernel is not None:
            if f['box'] < 2 * kernel.space_support:
                issues.append(f"Бокс L={f['box']} меньше двух носителей ядра ({2 * kernel.space_support})")
            if f['h_x'] > kernel.space_support / 4:
                issues.append(f"Шаг h_x={f['h_x']} грубее четверти носителя ядра")
            if not self.white_in_time and f['h_t'] > kernel.time_support / 4:
                issues.append(f"Шаг h_t={f['h_t']} грубее четверти временного носителя")
        try:
            grid = Grid(d, f['box'], f['h_x'], f['cfl_fraction'] * f['h_x'] ** 2 / (2 * d))
        except ValidationError as e:
            issues.append(str(e))
            grid = None

        if m['beta'] < 0:
            issues.append(f"β должно быть неотрицательным, получено {m['beta']}")
        if m['a'] <= 0:
            issues.append(f"A_EFF должна быть положительной, получено {m['a']}")
        if not 1 < m['gamma'] < 2:
            issues.append(f"γ должно лежать в (1, 2), получено {m['gamma']}")
        if m['u0'] not in ('gaussian', 'constant'):
            issues.append(f"Неизвестный профиль начальных данных '{m['u0']}'")

        for name in ('eps_strong', 'eps_weak'):
            if any(not 0 < e < 1 for e in conv[name]):
                issues.append(f"Все ε в {name} должны лежать в (0, 1)")
        if any(not 0 < e < 1 for e in self.config['noise']['eps_grid']):
            issues.append("Все ε в NOISE_EPS должны лежать в (0, 1)")
        if len(set(self.config['noise']['eps_grid'])) < 2:
            issues.append("Для экстраполяции ε → 0 нужны хотя бы два различных ε в NOISE_EPS")
        if any(len(point) != d for point in conv['probes']):
            issues.append(f"Каждая точка PROBES должна иметь {d} координат")

        if any(r >= f['box'] / 2 for r in self.config['stationary']['separations']):
            issues.append("Разнесения таблицы ковариации должны быть меньше половины бокса")
        stationary = self.config['stationary']
        far = [r for r in stationary['separations'] if r * r > stationary['S']]
        if far:
            warnings.append(
                f"Разнесения {far} больше √STATIONARY_S={stationary['S'] ** 0.5:.3g}: "
                f"хвост таблицы ковариации будет далёк от стационарности"
            )
        if p['dt'] <= 0 or not all(_is_multiple(s, p['dt']) for s in p['s_grid']):
            issues.append(f"Точки CALIBRATION_S должны быть кратны PATH_DT={p['dt']}")

        strong = command in (None, 'converge-strong')
        weak = command in (None, 'converge-weak')
        if weak and grid is not None and 1 < m['gamma'] < 2 and all(0 < e < 1 for e in conv['eps_weak']):
            slices = max(grid.steps(0.0, min(e ** -m['gamma'], m['t'] / e ** 2))[0] + 1 for e in conv['eps_weak'])
            need = memory_estimate(grid, slices * (d + 1))
            if need > self.memory_budget():
                issues.append(
                    f"Траектория мезоскопического отрезка займёт {need / 1024 ** 2:.0f} МБ "
                    f"при бюджете {tol['memory_budget_mb']} МБ: уменьшите бокс или увеличьте ε"
                )

        if m['u0'] == 'gaussian':
            checked = set(conv['eps_strong'] if strong else ()) | set(conv['eps_weak'] if weak else ())
            for e in sorted(checked):
                if not 0 < e < 1:
                    continue
                guard = wrap_guard(f['box'], 1.0, m['a'] * m['t'] / e ** 2 + (m['u0_sigma'] / e) ** 2, d)
                if guard > tol['wrap_tolerance']:
                    issues.append(
                        f"Бокс L={f['box']} мал для ε={e}: вероятность заворачивания {guard:.2g} "
                        f"> {tol['wrap_tolerance']}"
                    )

        if self.config['converge']['realizations'] < 20:
            warnings.append("Меньше 20 реализаций на ε: показатель слабой ошибки подгоняться не будет")
        if m['beta'] == 0:
            warnings.append("β = 0: ν² не определена, команда noise будет отклонена")

        return {
            'valid': len(issues) == 0,
            'issues': issues,
            'warnings': warnings,
            'config': self.config,
        }


def load_config(config_file: Optional[Union[str, Path]] = None, use_env: bool = True,
                **overrides) -> ExperimentConfig:
    """
    Конфигурация из файла, окружения и флагов CLI
    """
    config = ExperimentConfig(config_file, use_env)
    config.apply_overrides(**overrides)
    return config
