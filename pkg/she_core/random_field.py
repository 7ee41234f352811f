"""
Гладкий стационарный изотропный гауссов потенциал V(s, y) и его ковариация R

V получается сверткой решёточного белого шума с профилями μ (по времени)
и ν (по пространству); носители профилей компактны, поэтому R(s, y) = 0
точно при |s| > 1 или |y| > 1.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate, ndimage, special

from .errors import FieldWindowError, ValidationError
from .persistence import load_array, save_array

logger = logging.getLogger(__name__)

# Ограничения на носители ядер
MAX_TIME_SUPPORT = 1.0
MAX_SPACE_RADIUS = 0.5

QUAD_OPTIONS = {'epsabs': 0.0, 'epsrel': 1e-12, 'limit': 200}
TABLE_SIZE = 401
GAUSS_NODES = 48
WINDOW_TOL = 1e-9


def sphere_area(dimension: int) -> float:
    """
    Площадь единичной сферы S^{d-1}
    """
    return 2.0 * np.pi ** (dimension / 2.0) / special.gamma(dimension / 2.0)


@dataclass(frozen=True)
class KernelSpec:
    """
    Профили μ (время) и ν (пространство) с константами нормировки

    Профили полиномиальные: μ(s) ∝ (s(w−s))^p на [0, w], ν(y) ∝ (ρ²−|y|²)^p
    при |y| ≤ ρ. Нормировка единичная в L², так что R(0, 0) = 1.
    """

    dimension: int
    degree: int
    time_support: float
    space_radius: float
    time_l1: float
    time_l2: float
    space_l1: float
    space_l2: float

    @property
    def time_scale(self) -> float:
        return 1.0 / np.sqrt(self.time_l2)

    @property
    def space_scale(self) -> float:
        return 1.0 / np.sqrt(self.space_l2)

    @property
    def space_support(self) -> float:
        """Диаметр пространственного носителя"""
        return 2.0 * self.space_radius

    @property
    def white_mass(self) -> float:
        """‖μ‖₂², масса дельта-функции в режиме белого по времени шума"""
        return 1.0

    def time_profile(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        w = self.time_support
        inside = (s >= 0.0) & (s <= w)
        base = np.where(inside, s * (w - s), 0.0)
        return self.time_scale * base ** self.degree

    def space_profile_radial(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        rho2 = self.space_radius ** 2
        base = np.where(r <= self.space_radius, rho2 - r ** 2, 0.0)
        return self.space_scale * np.clip(base, 0.0, None) ** self.degree

    def space_profile(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self.space_profile_radial(np.linalg.norm(y, axis=-1))

    def to_dict(self) -> Dict:
        return {
            'dimension': self.dimension,
            'degree': self.degree,
            'time_support': self.time_support,
            'space_radius': self.space_radius,
            'time_l1': self.time_l1,
            'time_l2': self.time_l2,
            'space_l1': self.space_l1,
            'space_l2': self.space_l2,
        }


def kernel_spec_id(spec: KernelSpec) -> str:
    """
    Короткий стабильный идентификатор спецификации ядер
    """
    payload = json.dumps({k: repr(v) for k, v in spec.to_dict().items()}, sort_keys=True)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()[:12]


def _radial_integral(power: int, radius: float, dimension: int) -> float:
    """
    ∫_{|y|≤ρ} (ρ²−|y|²)^power dy через радиальную квадратуру
    """
    value, _ = integrate.quad(
        lambda r: (radius ** 2 - r ** 2) ** power * r ** (dimension - 1),
        0.0, radius, **QUAD_OPTIONS
    )
    return sphere_area(dimension) * value


def make_kernels(time_support: float = 1.0,
                 space_radius: float = 0.5,
                 degree: int = 4,
                 dimension: int = 3) -> KernelSpec:
    """
    Построение спецификации ядер с константами нормировки

    Args:
        time_support: ширина носителя μ (≤ 1)
        space_radius: радиус носителя ν (≤ 1/2)
        degree: степень полиномиального горба (≥ 2)
        dimension: размерность пространства (≥ 3)

    Returns:
        KernelSpec
    """
    if time_support <= 0 or space_radius <= 0:
        raise ValidationError("Ширина ядра должна быть положительной")
    if time_support > MAX_TIME_SUPPORT + 1e-12:
        raise ValidationError(f"Носитель μ [0, {time_support}] выходит за [0, 1]")
    if space_radius > MAX_SPACE_RADIUS + 1e-12:
        raise ValidationError(f"Радиус носителя ν {space_radius} больше 1/2")
    if int(degree) != degree or degree < 2:
        raise ValidationError(f"Степень гладкости должна быть целой и ≥ 2, получено {degree}")
    if int(dimension) != dimension or dimension < 3:
        raise ValidationError(f"Размерность должна быть ≥ 3, получено {dimension}")
    degree = int(degree)
    dimension = int(dimension)

    w = float(time_support)
    time_l1, _ = integrate.quad(lambda s: (s * (w - s)) ** degree, 0.0, w, **QUAD_OPTIONS)
    time_l2, _ = integrate.quad(lambda s: (s * (w - s)) ** (2 * degree), 0.0, w, **QUAD_OPTIONS)
    space_l1 = _radial_integral(degree, float(space_radius), dimension)
    space_l2 = _radial_integral(2 * degree, float(space_radius), dimension)

    spec = KernelSpec(
        dimension=dimension,
        degree=degree,
        time_support=w,
        space_radius=float(space_radius),
        time_l1=float(time_l1),
        time_l2=float(time_l2),
        space_l1=float(space_l1),
        space_l2=float(space_l2),
    )
    logger.debug(f"Ядра построены: {kernel_spec_id(spec)} (d={dimension}, p={degree})")
    return spec


def _time_autocorrelation(spec: KernelSpec, lags: np.ndarray) -> np.ndarray:
    nodes, weights = leggauss(GAUSS_NODES)
    w = spec.time_support
    table = np.empty_like(lags)
    for i, lag in enumerate(lags):
        length = w - lag
        if length <= 0:
            table[i] = 0.0
            continue
        t = 0.5 * length * (nodes + 1.0)
        table[i] = 0.5 * length * np.sum(weights * spec.time_profile(t + lag) * spec.time_profile(t))
    table[0] = 1.0
    return table


def _space_autocorrelation(spec: KernelSpec, distances: np.ndarray) -> np.ndarray:
    """
    ∫ν(z)ν(z + r e₁)dz в цилиндрических координатах вдоль оси сдвига
    """
    nodes, weights = leggauss(GAUSS_NODES)
    radius = spec.space_radius
    d = spec.dimension
    area = sphere_area(d - 1)
    c2 = spec.space_scale ** 2
    p = spec.degree

    def piece(lo: float, hi: float, r: float) -> float:
        if hi <= lo:
            return 0.0
        z1 = lo + 0.5 * (hi - lo) * (nodes + 1.0)
        q_a = radius ** 2 - z1 ** 2
        q_b = radius ** 2 - (z1 + r) ** 2
        rho_max = np.sqrt(np.clip(np.minimum(q_a, q_b), 0.0, None))
        rho = 0.5 * rho_max[:, None] * (nodes[None, :] + 1.0)
        integrand = (np.clip(q_a[:, None] - rho ** 2, 0.0, None) ** p
                     * np.clip(q_b[:, None] - rho ** 2, 0.0, None) ** p
                     * rho ** (d - 2))
        inner = 0.5 * rho_max * np.sum(weights[None, :] * integrand, axis=1)
        return 0.5 * (hi - lo) * float(np.sum(weights * inner))

    table = np.empty_like(distances)
    for i, r in enumerate(distances):
        lo, hi = -radius, radius - r
        split = min(max(-0.5 * r, lo), hi)
        table[i] = c2 * area * (piece(lo, split, r) + piece(split, hi, r))
    table[0] = 1.0
    return table


class CovarianceR:
    """
    Ковариация R(s, y) = ρ_t(s)·ρ_x(|y|) по предвычисленным таблицам

    В режиме белого по времени шума временная часть заменяется дельтой
    массы ‖μ‖₂²; time_part тогда описывает только цветной случай.
    """

    def __init__(self, spec: KernelSpec, white_in_time: bool = False):
        self.spec = spec
        self.white_in_time = bool(white_in_time)
        self.time_grid = np.linspace(0.0, spec.time_support, TABLE_SIZE)
        self.space_grid = np.linspace(0.0, spec.space_support, TABLE_SIZE)
        self.time_table = _time_autocorrelation(spec, self.time_grid)
        self.space_table = _space_autocorrelation(spec, self.space_grid)

    @property
    def white_mass(self) -> float:
        return self.spec.white_mass

    @property
    def time_range(self) -> float:
        return self.spec.time_support

    def time_part(self, s) -> np.ndarray:
        s = np.abs(np.asarray(s, dtype=float))
        return np.interp(s, self.time_grid, self.time_table, right=0.0)

    def space_part(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return np.interp(r, self.space_grid, self.space_table, right=0.0)

    def space_at_zero(self) -> float:
        """R_sp(0), пространственная автокорреляция в нуле"""
        return float(self.space_table[0])

    def __call__(self, s, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self.time_part(s) * self.space_part(np.linalg.norm(y, axis=-1))


@lru_cache(maxsize=32)
def covariance_for(spec: KernelSpec, white_in_time: bool = False) -> CovarianceR:
    """
    Кэшированная таблица ковариации для спецификации ядер
    """
    return CovarianceR(spec, white_in_time)


def covariance_R(s: float, y, spec: KernelSpec) -> float:
    """
    R(s, y) = ∫μ(s+t)μ(t)dt · ∫ν(y+z)ν(z)dz
    """
    value = covariance_for(spec)(s, np.asarray(y, dtype=float))
    return float(value)


def time_stencil(spec: KernelSpec, h_t: float) -> np.ndarray:
    """
    Дискретный временной профиль a_m = μ(m h_t)√h_t, Σa_m² = ‖μ‖₂²
    """
    m = np.arange(int(np.floor(spec.time_support / h_t + 1e-9)) + 1)
    a = spec.time_profile(m * h_t) * np.sqrt(h_t)
    return a / np.sqrt(np.sum(a ** 2))


def space_stencil(spec: KernelSpec, h_x: float) -> np.ndarray:
    """
    Дискретный пространственный профиль b_n = ν(n h_x) h_x^{d/2}, Σb_n² = ‖ν‖₂²
    """
    half = int(np.floor(spec.space_radius / h_x + 1e-9))
    axis = np.arange(-half, half + 1) * h_x
    mesh = np.meshgrid(*([axis] * spec.dimension), indexing='ij')
    radius = np.sqrt(sum(component ** 2 for component in mesh))
    b = spec.space_profile_radial(radius) * h_x ** (spec.dimension / 2.0)
    return b / np.sqrt(np.sum(b ** 2))


def _node_count(length: float, spacing: float, what: str) -> int:
    count = length / spacing
    rounded = int(round(count))
    if rounded < 1 or abs(count - rounded) > 1e-9 * max(1.0, count):
        raise ValidationError(f"{what}: шаг {spacing} не делит длину {length}")
    return rounded


@dataclass(frozen=True, eq=False)
class FieldRealization:
    """
    Решёточная реализация V с интерполяцией и метаданными

    values имеет форму (n_t, N, ..., N); узел j соответствует точке
    y = (j − N/2)·h_x на периодическом торе со стороной box. В цветном режиме
    n_t узлов по времени s_min + i·h_t; в режиме белого шума n_t ячеек
    [s_min + i·h_t, s_min + (i+1)·h_t), значение в ячейке постоянно.
    """

    values: np.ndarray
    h_t: float
    h_x: float
    box: float
    s_min: float
    s_max: float
    kernel: KernelSpec
    white_in_time: bool = False
    seed: str = ''

    def __post_init__(self):
        self.values.setflags(write=False)

    @property
    def dimension(self) -> int:
        return self.values.ndim - 1

    @property
    def n_space(self) -> int:
        return self.values.shape[1]

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def window(self) -> Tuple[float, float]:
        return self.s_min, self.s_max

    def covers(self, s_lo: float, s_hi: float) -> bool:
        return s_lo >= self.s_min - WINDOW_TOL and s_hi <= self.s_max + WINDOW_TOL

    def require_window(self, s_lo: float, s_hi: float):
        if not self.covers(s_lo, s_hi):
            raise FieldWindowError(
                f"Запрос [{s_lo:.6g}, {s_hi:.6g}] вне окна поля [{self.s_min:.6g}, {self.s_max:.6g}]"
            )

    def time_coordinate(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.size and (np.min(s) < self.s_min - WINDOW_TOL or np.max(s) > self.s_max + WINDOW_TOL):
            raise FieldWindowError(
                f"Время вне окна поля [{self.s_min:.6g}, {self.s_max:.6g}]"
            )
        raw = (s - self.s_min) / self.h_t
        if self.white_in_time:
            return np.clip(np.floor(raw + 1e-9), 0, self.n_time - 1)
        return np.clip(raw, 0.0, self.n_time - 1)

    def space_coordinate(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) / self.h_x + 0.5 * self.n_space

    def node_positions(self) -> np.ndarray:
        """Координаты узлов одной оси"""
        return (np.arange(self.n_space) - 0.5 * self.n_space) * self.h_x

    def eval(self, s, y) -> Union[float, np.ndarray]:
        """
        Интерполяция V(s, y): полилинейная по пространству (периодически),
        линейная по времени (кусочно-постоянная в режиме белого шума)
        """
        y = np.asarray(y, dtype=float)
        d = self.dimension
        if y.shape[-1] != d:
            raise ValidationError(f"Ожидалась точка размерности {d}, получено {y.shape}")
        batch_shape = y.shape[:-1]
        s_flat = np.broadcast_to(np.asarray(s, dtype=float), batch_shape).reshape(-1)
        y_flat = y.reshape(-1, d)
        coords = np.empty((d + 1, y_flat.shape[0]))
        coords[0] = self.time_coordinate(s_flat)
        coords[1:] = self.space_coordinate(y_flat).T
        out = ndimage.map_coordinates(self.values, coords, order=1, mode='grid-wrap')
        if not batch_shape:
            return float(out[0])
        return out.reshape(batch_shape)

    def slice_at(self, s: float) -> np.ndarray:
        """
        Значения V(s, ·) на решётке (для сеточного решателя)
        """
        c = float(self.time_coordinate(np.array([s]))[0])
        i = int(np.floor(c))
        frac = c - i
        if self.white_in_time or frac == 0.0 or i >= self.n_time - 1:
            return self.values[min(i, self.n_time - 1)]
        return (1.0 - frac) * self.values[i] + frac * self.values[i + 1]

    def time_reflected(self) -> 'FieldRealization':
        """
        Реализация V'(s, y) = V(−s, y) на отражённом окне
        """
        return FieldRealization(
            values=np.ascontiguousarray(self.values[::-1]),
            h_t=self.h_t,
            h_x=self.h_x,
            box=self.box,
            s_min=-self.s_max,
            s_max=-self.s_min,
            kernel=self.kernel,
            white_in_time=self.white_in_time,
            seed=f"{self.seed}|reflected",
        )

    def header(self) -> Dict:
        return {
            'h_t': self.h_t,
            'h_x': self.h_x,
            'box': self.box,
            'window': [self.s_min, self.s_max],
            'white_in_time': self.white_in_time,
            'seed': self.seed,
            'kernel': self.kernel.to_dict(),
            'kernel_id': kernel_spec_id(self.kernel),
        }

    @classmethod
    def constant(cls, value: float, kernel: KernelSpec, box: float, h_x: float,
                 window: Tuple[float, float], h_t: float) -> 'FieldRealization':
        """
        Постоянное поле V ≡ value (для проверок решателей)
        """
        n_space = _node_count(box, h_x, "Пространственная решётка")
        n_time = _node_count(window[1] - window[0], h_t, "Временная решётка") + 1
        shape = (n_time,) + (n_space,) * kernel.dimension
        return cls(np.full(shape, float(value)), h_t, h_x, box, window[0], window[1],
                   kernel, False, f"constant:{value}")


def save_field(field_: FieldRealization, directory: Union[str, Path], name: str = 'field'):
    """
    Сохранение реализации: плоский float64 + JSON-заголовок
    """
    return save_array(directory, name, field_.values, field_.header())


def load_field(directory: Union[str, Path], name: str = 'field') -> FieldRealization:
    values, header = load_array(directory, name)
    kernel = KernelSpec(**header['kernel'])
    return FieldRealization(
        values=values,
        h_t=header['h_t'],
        h_x=header['h_x'],
        box=header['box'],
        s_min=header['window'][0],
        s_max=header['window'][1],
        kernel=kernel,
        white_in_time=header['white_in_time'],
        seed=header['seed'],
    )


def _as_seed_sequence(seed) -> Tuple[np.random.SeedSequence, str]:
    if isinstance(seed, np.random.SeedSequence):
        return seed, f"{seed.entropy}:{list(seed.spawn_key)}"
    if isinstance(seed, (int, np.integer)):
        return np.random.SeedSequence(int(seed)), str(int(seed))
    raise ValidationError(f"Неподдерживаемый сид поля: {seed!r}")


def sample_field(spec: KernelSpec,
                 box: float,
                 window: Tuple[float, float],
                 spacings: Tuple[float, float],
                 seed,
                 white_in_time: bool = False) -> FieldRealization:
    """
    Реализация V на решётке

    Args:
        spec: спецификация ядер
        box: сторона периодического куба
        window: временное окно [s_min, s_max]
        spacings: (h_t, h_x)
        seed: int или SeedSequence
        white_in_time: режим белого по времени шума

    Returns:
        FieldRealization
    """
    h_t, h_x = float(spacings[0]), float(spacings[1])
    s_min, s_max = float(window[0]), float(window[1])
    if h_t <= 0 or h_x <= 0:
        raise ValidationError("Шаги решётки должны быть положительными")
    if box < 2.0 * spec.space_support - 1e-12:
        raise ValidationError(
            f"Сторона бокса {box} меньше удвоенного носителя ядра {2.0 * spec.space_support}"
        )
    if h_x > spec.space_support / 4.0 + 1e-12:
        raise ValidationError(f"Шаг h_x={h_x} грубее четверти ширины ядра {spec.space_support / 4.0}")
    if not white_in_time:
        if h_t > spec.time_support / 4.0 + 1e-12:
            raise ValidationError(f"Шаг h_t={h_t} грубее четверти ширины ядра {spec.time_support / 4.0}")
        if s_max - s_min < spec.time_support - 1e-12:
            raise ValidationError(
                f"Окно [{s_min}, {s_max}] короче временного носителя ядра {spec.time_support}"
            )

    n_space = _node_count(box, h_x, "Пространственная решётка")
    n_steps = _node_count(s_max - s_min, h_t, "Временная решётка")
    seed_sequence, seed_label = _as_seed_sequence(seed)
    rng = np.random.Generator(np.random.Philox(seed_sequence))
    d = spec.dimension
    b = space_stencil(spec, h_x)

    if white_in_time:
        noise = rng.standard_normal((n_steps,) + (n_space,) * d)
        smoothed = ndimage.convolve(noise, b[None], mode='wrap')
        values = np.sqrt(spec.white_mass / h_t) * smoothed
    else:
        a = time_stencil(spec, h_t)
        lead = a.size - 1
        n_time = n_steps + 1
        noise = rng.standard_normal((n_time + lead,) + (n_space,) * d)
        in_time = np.zeros((n_time,) + (n_space,) * d)
        for m, weight in enumerate(a):
            if weight != 0.0:
                in_time += weight * noise[lead - m: lead - m + n_time]
        values = ndimage.convolve(in_time, b[None], mode='wrap')

    logger.debug(
        f"Поле: d={d}, N={n_space}, окно=[{s_min}, {s_max}], "
        f"режим={'white' if white_in_time else 'colored'}, seed={seed_label}"
    )
    return FieldRealization(
        values=np.ascontiguousarray(values),
        h_t=h_t,
        h_x=h_x,
        box=float(box),
        s_min=s_min,
        s_max=s_max,
        kernel=spec,
        white_in_time=bool(white_in_time),
        seed=seed_label,
    )


def eval_V(field_: FieldRealization, s, y):
    """
    V(s, y) по решётке с интерполяцией; вне окна — FieldWindowError
    """
    return field_.eval(s, y)


@dataclass(frozen=True)
class FieldSpec:
    """
    Всё, что нужно для выборки реализаций: ядра, бокс, шаги, режим
    """

    kernel: KernelSpec
    box: float
    h_x: float
    h_t: float
    white_in_time: bool = False

    @property
    def dimension(self) -> int:
        return self.kernel.dimension

    @property
    def covariance(self) -> CovarianceR:
        return covariance_for(self.kernel, self.white_in_time)

    @property
    def kernel_id(self) -> str:
        return kernel_spec_id(self.kernel)

    def covering_window(self, s_lo: float, s_hi: float) -> Tuple[float, float]:
        """
        Наименьшее допустимое окно, начинающееся в s_lo и покрывающее s_hi
        """
        length = s_hi - s_lo
        if not self.white_in_time:
            length = max(length, self.kernel.time_support)
        steps = max(1, int(np.ceil(length / self.h_t - 1e-9)))
        return float(s_lo), float(s_lo + steps * self.h_t)

    def sample(self, window: Tuple[float, float], seed) -> FieldRealization:
        return sample_field(self.kernel, self.box, window, (self.h_t, self.h_x), seed, self.white_in_time)

    def to_dict(self) -> Dict:
        return {
            'kernel': self.kernel.to_dict(),
            'kernel_id': self.kernel_id,
            'box': self.box,
            'h_x': self.h_x,
            'h_t': self.h_t,
            'mode': 'white' if self.white_in_time else 'colored',
        }
