"""
Фейнман–Кац: выборка броуновских путей, функционалы 𝒱 и ℛ, наклонённая
мера как самонормированная выборка по значимости, статсумма Z_s
и калибровка λ(β), α_∞
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, StatisticalGuardError, ValidationError
from .estimates import Estimate, grouped_jackknife, linear_fit
from .parallel import map_blocks
from .random_field import CovarianceR, FieldRealization, FieldSpec
from .rng import as_stage

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.05
ESS_FLOOR = 10.0
LATTICE_TOL = 1e-9
MIN_FIT_WINDOW = (4.0, 16.0)


def lattice_steps(length: float, dt: float, what: str = "Горизонт") -> int:
    """
    Число шагов dt в отрезке длины length (длина должна быть кратна dt)
    """
    if dt <= 0:
        raise ValidationError(f"Шаг пути должен быть положительным, получено dt={dt}")
    if length < -LATTICE_TOL:
        raise ValidationError(f"{what} отрицателен: {length}")
    count = length / dt
    steps = int(round(count))
    if abs(count - steps) > 1e-7 * max(1.0, count):
        raise ValidationError(f"{what} {length} не кратен шагу dt={dt}")
    return max(steps, 0)


@dataclass(frozen=True, eq=False)
class PathSample:
    """
    Один дискретный (возможно двусторонний) броуновский путь

    positions[k] — положение в момент −T_bwd + k·dt; положение в момент 0
    совпадает с точкой старта.
    """

    positions: np.ndarray
    dt: float
    n_backward: int
    start: np.ndarray
    stream_id: int = 0

    @property
    def forward(self) -> np.ndarray:
        return self.positions[self.n_backward:]

    @property
    def backward(self) -> np.ndarray:
        """Положения в моменты 0, −dt, ..., −T_bwd"""
        return self.positions[self.n_backward::-1]

    @property
    def t_min(self) -> float:
        return -self.n_backward * self.dt

    @property
    def t_max(self) -> float:
        return (self.positions.shape[0] - 1 - self.n_backward) * self.dt

    def times(self) -> np.ndarray:
        return self.t_min + self.dt * np.arange(self.positions.shape[0])

    def at(self, time: float) -> np.ndarray:
        return self.positions[lattice_steps(time - self.t_min, self.dt, "Момент времени")]


@dataclass(frozen=True, eq=False)
class PathBatch:
    """
    Пачка путей с общими стартом, шагом и горизонтами

    positions имеет форму (n, m, d); ось 1 — моменты −T_bwd + k·dt.
    """

    positions: np.ndarray
    dt: float
    n_backward: int
    start: np.ndarray
    stream_ids: np.ndarray

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def dimension(self) -> int:
        return self.positions.shape[2]

    @property
    def t_min(self) -> float:
        return -self.n_backward * self.dt

    @property
    def t_max(self) -> float:
        return (self.positions.shape[1] - 1 - self.n_backward) * self.dt

    def index_of(self, time: float) -> int:
        k = lattice_steps(time - self.t_min, self.dt, "Момент времени")
        if k >= self.positions.shape[1]:
            raise ValidationError(
                f"Момент {time} вне горизонта пути [{self.t_min}, {self.t_max}]"
            )
        return k

    def segment(self, a: float, b: float) -> np.ndarray:
        """
        Положения на отрезке [a, b] решётки dt, форма (n, m+1, d)
        """
        if b < a:
            raise ValidationError(f"Пустой или обращённый интервал [{a}, {b}]")
        i, j = self.index_of(a), self.index_of(b)
        return self.positions[:, i:j + 1]

    def at(self, time: float) -> np.ndarray:
        return self.positions[:, self.index_of(time)]

    def position_at(self, times: Sequence[float]) -> np.ndarray:
        """
        Линейная интерполяция положений в произвольные моменты, форма (n, len(times), d)
        """
        times = np.asarray(times, dtype=float)
        if times.size and (times.min() < self.t_min - LATTICE_TOL or times.max() > self.t_max + LATTICE_TOL):
            raise ValidationError(
                f"Моменты вне горизонта пути [{self.t_min}, {self.t_max}]"
            )
        coord = np.clip((times - self.t_min) / self.dt, 0.0, self.positions.shape[1] - 1)
        lo = np.floor(coord).astype(int)
        nearest = np.rint(coord).astype(int)
        snapped = np.abs(coord - nearest) < LATTICE_TOL
        lo = np.where(snapped, nearest, lo)
        hi = np.minimum(lo + 1, self.positions.shape[1] - 1)
        frac = np.where(snapped, 0.0, coord - lo)
        return ((1.0 - frac)[None, :, None] * self.positions[:, lo]
                + frac[None, :, None] * self.positions[:, hi])

    def path(self, i: int) -> PathSample:
        return PathSample(self.positions[i], self.dt, self.n_backward, self.start, int(self.stream_ids[i]))

    def select(self, mask: np.ndarray) -> 'PathBatch':
        return PathBatch(self.positions[mask], self.dt, self.n_backward, self.start, self.stream_ids[mask])

    def coarsen(self, factor: int) -> 'PathBatch':
        """
        Тот же путь на решётке с шагом factor·dt
        """
        if factor < 1 or self.n_backward % factor or (self.positions.shape[1] - 1) % factor:
            raise ValidationError(f"Множитель огрубления {factor} не согласован с решёткой пути")
        return PathBatch(self.positions[:, ::factor], self.dt * factor, self.n_backward // factor,
                         self.start, self.stream_ids)

    @classmethod
    def from_samples(cls, samples: Sequence[PathSample]) -> 'PathBatch':
        if not samples:
            raise ValidationError("Пустой список путей")
        first = samples[0]
        return cls(
            positions=np.stack([p.positions for p in samples]),
            dt=first.dt,
            n_backward=first.n_backward,
            start=first.start,
            stream_ids=np.array([p.stream_id for p in samples], dtype=np.int64),
        )


def sample_path(start, T_fwd: float, T_bwd: float, dt: float,
                rng: np.random.Generator, stream_id: int = 0) -> PathSample:
    """
    Дискретный броуновский путь с точными гауссовыми приращениями

    Args:
        start: точка старта (в момент 0)
        T_fwd: горизонт вперёд
        T_bwd: горизонт назад (двусторонний путь при T_bwd > 0)
        dt: шаг
        rng: генератор потока

    Returns:
        PathSample
    """
    start = np.atleast_1d(np.asarray(start, dtype=float))
    n_fwd = lattice_steps(T_fwd, dt, "Горизонт вперёд")
    n_bwd = lattice_steps(T_bwd, dt, "Горизонт назад")
    d = start.size
    root = np.sqrt(dt)
    forward_steps = rng.standard_normal((n_fwd, d)) * root
    backward_steps = rng.standard_normal((n_bwd, d)) * root

    positions = np.empty((n_bwd + n_fwd + 1, d))
    positions[n_bwd] = start
    positions[n_bwd + 1:] = start + np.cumsum(forward_steps, axis=0)
    if n_bwd:
        positions[:n_bwd] = (start + np.cumsum(backward_steps, axis=0))[::-1]
    return PathSample(positions, float(dt), n_bwd, start, int(stream_id))


def sample_ensemble(n: int, start, T_fwd: float, T_bwd: float, dt: float,
                    streams, first_id: int = 0) -> PathBatch:
    """
    Ансамбль из n путей, поток номер first_id + i для пути i
    """
    if n < 1:
        raise ValidationError(f"Размер ансамбля должен быть ≥ 1, получено {n}")
    stage = as_stage(streams, 'paths')

    def block(ids: np.ndarray) -> List[PathSample]:
        return [sample_path(start, T_fwd, T_bwd, dt, stage.generator(first_id + i), first_id + i)
                for i in ids]

    samples = [p for chunk in map_blocks(block, n) for p in chunk]
    return PathBatch.from_samples(samples)


def _trapezoid_weights(n_points: int, dt: float) -> np.ndarray:
    w = np.full(n_points, dt)
    if n_points == 1:
        return np.zeros(1)
    w[0] = w[-1] = 0.5 * dt
    return w


def script_V_batch(field_: FieldRealization, s: float, interval: Tuple[float, float],
                   paths: PathBatch) -> np.ndarray:
    """
    𝒱_{s;[a,b]}[B] = ∫_a^b V(s−τ, B_τ)dτ для всех путей пачки

    Цветной режим: формула трапеций в узлах пути. Режим белого шума:
    на каждом шаге значение ячейки, содержащей середину шага.
    """
    a, b = float(interval[0]), float(interval[1])
    if b - a <= LATTICE_TOL:
        return np.zeros(len(paths))
    field_.require_window(s - b, s - a)
    pos = paths.segment(a, b)
    taus = a + paths.dt * np.arange(pos.shape[1])
    if field_.white_in_time:
        mid_times = s - (taus[:-1] + 0.5 * paths.dt)
        left = field_.eval(np.broadcast_to(mid_times, pos[:, :-1, 0].shape), pos[:, :-1])
        right = field_.eval(np.broadcast_to(mid_times, pos[:, 1:, 0].shape), pos[:, 1:])
        return paths.dt * np.sum(0.5 * (left + right), axis=1)
    values = field_.eval(np.broadcast_to(s - taus, pos[..., 0].shape), pos)
    return values @ _trapezoid_weights(pos.shape[1], paths.dt)


def script_V(field_: FieldRealization, s: float, interval: Tuple[float, float],
             path: Union[PathSample, PathBatch]):
    """
    𝒱 для одного пути (float) или пачки путей (массив)
    """
    if isinstance(path, PathBatch):
        return script_V_batch(field_, s, interval, path)
    batch = PathBatch(path.positions[None], path.dt, path.n_backward, path.start,
                      np.array([path.stream_id]))
    return float(script_V_batch(field_, s, interval, batch)[0])


def _interval_positions(path: Union[PathSample, PathBatch], interval: Tuple[float, float]) -> Tuple[np.ndarray, float]:
    if isinstance(path, PathSample):
        batch = PathBatch(path.positions[None], path.dt, path.n_backward, path.start,
                          np.array([path.stream_id]))
        return batch.segment(*interval), path.dt
    return path.segment(*interval), path.dt


def overlap_R(interval_a: Tuple[float, float], interval_b: Tuple[float, float],
              pos_a: np.ndarray, pos_b: np.ndarray, covariance: CovarianceR,
              dt: float, lag: float = 0.0) -> np.ndarray:
    """
    ∫_A∫_B R(τ − τ̃ + lag, B_τ − B̃_τ̃) dτ dτ̃ по ленте |τ − τ̃ + lag| ≤ носителя

    pos_a, pos_b — положения на решётках интервалов, форма (n, m+1, d);
    путь i из A сопоставляется пути i из B.
    """
    a0, b0 = float(interval_a[0]), float(interval_b[0])
    n_a, n_b = pos_a.shape[1] - 1, pos_b.shape[1] - 1
    n_paths = pos_a.shape[0]
    total = np.zeros(n_paths)
    if n_a <= 0 or n_b <= 0:
        return total

    offset_exact = (a0 - b0 + lag) / dt
    offset = int(round(offset_exact))
    if abs(offset_exact - offset) > 1e-7 * max(1.0, abs(offset_exact)):
        raise ValidationError("Интервалы и сдвиг ℛ не согласованы с решёткой dt")

    w_a = _trapezoid_weights(n_a + 1, dt)
    w_b = _trapezoid_weights(n_b + 1, dt)

    if covariance.white_in_time:
        # δ по времени: только пары j = i + offset
        i_lo, i_hi = max(0, -offset), min(n_a, n_b - offset)
        if i_hi <= i_lo:
            return total
        i = np.arange(i_lo, i_hi + 1)
        dist = np.linalg.norm(pos_a[:, i] - pos_b[:, i + offset], axis=-1)
        weights = _trapezoid_weights(i.size, dt)
        return covariance.white_mass * (covariance.space_part(dist) @ weights)

    band = int(np.floor(covariance.time_range / dt + 1e-9))
    for m in range(offset - band, offset + band + 1):
        time_value = float(covariance.time_part((offset - m) * dt))
        if time_value == 0.0:
            continue
        i_lo, i_hi = max(0, -m), min(n_a, n_b - m)
        if i_hi < i_lo:
            continue
        i = np.arange(i_lo, i_hi + 1)
        dist = np.linalg.norm(pos_a[:, i] - pos_b[:, i + m], axis=-1)
        total += time_value * (covariance.space_part(dist) @ (w_a[i] * w_b[i + m]))

    if logger.isEnabledFor(logging.DEBUG) and np.any(total < 0):
        raise NumericalError("Отрицательное значение ℛ")
    return total


def script_R(interval_a: Tuple[float, float], interval_b: Tuple[float, float],
             path_a: Union[PathSample, PathBatch], path_b: Union[PathSample, PathBatch],
             covariance: CovarianceR, lag: float = 0.0):
    """
    ℛ_{A,B}[B, B̃] = ∫_A∫_B R(τ − τ̃ + lag, B_τ − B̃_τ̃) dτ dτ̃

    Args:
        interval_a: интервал для первого пути
        interval_b: интервал для второго пути
        path_a: путь или пачка путей
        path_b: путь или пачка путей (той же длины)
        covariance: таблица ковариации
        lag: сдвиг по времени (s̃ − s для пары Ψ(s,·)Ψ(s̃,·))

    Returns:
        float для одиночных путей, массив для пачек
    """
    pos_a, dt_a = _interval_positions(path_a, interval_a)
    pos_b, dt_b = _interval_positions(path_b, interval_b)
    if abs(dt_a - dt_b) > 1e-12:
        raise ValidationError("Пути с разными шагами dt")
    result = overlap_R(interval_a, interval_b, pos_a, pos_b, covariance, dt_a, lag)
    if isinstance(path_a, PathSample) and isinstance(path_b, PathSample):
        return float(result[0])
    return result


@dataclass(frozen=True, eq=False)
class WeightedEnsemble:
    """
    Пути с весами наклона exp{½β²ℛ_interval[B]}
    """

    paths: Optional[PathBatch]
    log_weights: np.ndarray
    interval: Tuple[float, float]
    beta: float
    overlaps: np.ndarray

    def __len__(self) -> int:
        return self.log_weights.size

    def weights(self) -> np.ndarray:
        """Веса, отнормированные на максимальный (без переполнения)"""
        return np.exp(self.log_weights - np.max(self.log_weights))

    @property
    def ess(self) -> float:
        w = self.weights()
        return float(np.sum(w) ** 2 / np.sum(w ** 2))

    def with_beta(self, beta: float) -> 'WeightedEnsemble':
        """
        Те же пути и ℛ при другом β (общие случайные числа)
        """
        return replace(self, beta=float(beta), log_weights=0.5 * beta ** 2 * self.overlaps)

    def combined(self, other: 'WeightedEnsemble') -> 'WeightedEnsemble':
        """
        Ансамбль пар (B_i, B̃_i) с весом произведения
        """
        if len(self) != len(other):
            raise ValidationError("Ансамбли пары должны иметь одинаковый размер")
        return WeightedEnsemble(None, self.log_weights + other.log_weights,
                                self.interval, self.beta, self.overlaps + other.overlaps)

    def summary(self) -> Dict:
        return {
            'n': len(self),
            'interval': list(self.interval),
            'beta': self.beta,
            'ess': self.ess,
            'mean_overlap': float(np.mean(self.overlaps)),
        }


def tilt(paths: PathBatch, covariance: CovarianceR, beta: float,
         interval: Tuple[float, float]) -> WeightedEnsemble:
    """
    Вычисление ½β²ℛ_interval для каждого пути пачки
    """
    pos = paths.segment(*interval)
    overlaps = overlap_R(interval, interval, pos, pos, covariance, paths.dt)
    ensemble = WeightedEnsemble(paths, 0.5 * beta ** 2 * overlaps, tuple(interval), float(beta), overlaps)
    logger.debug(f"Наклон на {interval}: n={len(paths)}, ESS={ensemble.ess:.1f}")
    return ensemble


def tilted_expectation(functional, ensemble: WeightedEnsemble,
                       ess_floor: float = ESS_FLOOR,
                       seeds: Sequence[str] = ()) -> Estimate:
    """
    Самонормированная оценка Ê[functional] с ошибкой по дельта-методу

    Args:
        functional: массив значений (по путям) или функция от PathBatch
        ensemble: взвешенный ансамбль
        ess_floor: минимально допустимый эффективный объём выборки

    Returns:
        Estimate
    """
    if len(ensemble) == 0:
        raise ValidationError("Пустой ансамбль")
    values = functional(ensemble.paths) if callable(functional) else functional
    values = np.asarray(values, dtype=float)
    if values.shape != ensemble.log_weights.shape:
        raise ValidationError(f"Размер функционала {values.shape} не совпадает с ансамблем")

    w = ensemble.weights()
    ess = float(np.sum(w) ** 2 / np.sum(w ** 2))
    if ess < ess_floor:
        raise StatisticalGuardError(
            f"Вырожденные веса: ESS={ess:.2f} < {ess_floor} (наклон слишком силён для ансамбля)"
        )
    total = np.sum(w)
    value = np.sum(w * values) / total
    stderr = np.sqrt(np.sum(w ** 2 * (values - value) ** 2)) / total
    return Estimate(float(value), float(stderr), values.size, tuple(seeds))


def log_partition(ensemble: WeightedEnsemble,
                  ess_floor: float = ESS_FLOOR,
                  seeds: Sequence[str] = ()) -> Estimate:
    """
    log Z = log E exp{½β²ℛ} со стандартной ошибкой группового jackknife
    """
    lw = ensemble.log_weights
    n = lw.size
    if n == 0:
        raise ValidationError("Пустой ансамбль")
    if not np.any(lw):
        return Estimate(0.0, 0.0, n, tuple(seeds))
    if ensemble.ess < ess_floor:
        raise StatisticalGuardError(f"Вырожденные веса при оценке log Z: ESS={ensemble.ess:.2f}")

    def statistic(keep: np.ndarray) -> np.ndarray:
        return np.array([logsumexp(lw[keep]) - np.log(np.count_nonzero(keep))])

    full, stderr, _ = grouped_jackknife(statistic, n)
    return Estimate(float(full[0]), float(stderr[0]), n, tuple(seeds))


def alpha_s(log_z: float, lam: float, s: float) -> float:
    """
    α_s = log Z_s − λs
    """
    return log_z - lam * s


@dataclass(frozen=True)
class LambdaCalibration:
    """
    Результат калибровки: λ — наклон, α_∞ — свободный член аффинной
    аппроксимации log Z_s по s
    """

    beta: float
    kernel_id: str
    mode: str
    lam: Estimate
    alpha_inf: Estimate
    window: Tuple[float, float]
    max_residual: float
    s_grid: Tuple[float, ...] = ()
    log_z: Tuple[Estimate, ...] = ()
    alphas: Tuple[Estimate, ...] = ()
    min_ess: float = float('nan')

    @property
    def c_bar(self) -> float:
        return float(np.exp(self.alpha_inf.value))

    def table_rows(self) -> List[Dict]:
        rows = []
        for s, lz, al in zip(self.s_grid, self.log_z, self.alphas):
            rows.append({
                's': s,
                'log_z': lz.value,
                'log_z_stderr': lz.stderr,
                'alpha_s': al.value,
                'alpha_stderr': al.stderr,
            })
        return rows

    def to_dict(self) -> Dict:
        return {
            'beta': self.beta,
            'kernel_id': self.kernel_id,
            'mode': self.mode,
            'lambda': self.lam.to_dict(),
            'alpha_inf': self.alpha_inf.to_dict(),
            'window': list(self.window),
            'max_residual': self.max_residual,
            'min_ess': self.min_ess,
        }


def calibrate_lambda(beta: float,
                     field_spec: FieldSpec,
                     s_grid: Sequence[float],
                     n: int,
                     streams,
                     dt: float = DEFAULT_DT,
                     residual_max: float = 0.05,
                     ess_floor: float = ESS_FLOOR,
                     fit_window: Tuple[float, float] = MIN_FIT_WINDOW) -> LambdaCalibration:
    """
    Калибровка λ(β) и α_∞ аффинной аппроксимацией log Z_s

    Все log Z_s считаются на одном ансамбле путей (префиксы отрезка
    [0, max s]); ошибки наклона и свободного члена — групповым jackknife
    по путям.

    Args:
        beta: сила потенциала
        field_spec: спецификация поля (ядра, режим)
        s_grid: сетка значений s (должна покрывать fit_window)
        n: размер ансамбля
        streams: источник случайности
        dt: шаг пути
        residual_max: допустимый максимальный остаток аппроксимации

    Returns:
        LambdaCalibration
    """
    s_grid = tuple(sorted(float(s) for s in s_grid))
    mode = 'white' if field_spec.white_in_time else 'colored'
    if len(s_grid) < 2:
        raise ValidationError("Сетка s должна содержать хотя бы две точки")
    if s_grid[0] > fit_window[0] + 1e-12 or s_grid[-1] < fit_window[1] - 1e-12:
        raise ValidationError(
            f"Сетка s [{s_grid[0]}, {s_grid[-1]}] не покрывает окно [{fit_window[0]}, {fit_window[1]}]"
        )

    if beta == 0.0:
        zero = Estimate(0.0, 0.0, n)
        return LambdaCalibration(0.0, field_spec.kernel_id, mode, zero, zero,
                                 (s_grid[0], s_grid[-1]), 0.0, s_grid,
                                 tuple(zero for _ in s_grid), tuple(zero for _ in s_grid), float(n))

    stage = as_stage(streams, 'calibrate')
    covariance = field_spec.covariance
    origin = np.zeros(field_spec.dimension)
    paths = sample_ensemble(n, origin, s_grid[-1], 0.0, dt, stage)
    overlaps = np.stack([
        overlap_R((0.0, s), (0.0, s), paths.segment(0.0, s), paths.segment(0.0, s), covariance, dt)
        for s in s_grid
    ], axis=1)
    log_w = 0.5 * beta ** 2 * overlaps
    s_array = np.asarray(s_grid)

    min_ess = float('inf')
    for k in range(len(s_grid)):
        w = np.exp(log_w[:, k] - log_w[:, k].max())
        min_ess = min(min_ess, float(np.sum(w) ** 2 / np.sum(w ** 2)))
    if min_ess < ess_floor:
        raise StatisticalGuardError(f"Вырожденные веса при калибровке λ: ESS={min_ess:.2f}")

    def log_z_of(keep: np.ndarray) -> np.ndarray:
        count = np.count_nonzero(keep)
        return logsumexp(log_w[keep], axis=0) - np.log(count)

    def fit_of(keep: np.ndarray) -> np.ndarray:
        fit = linear_fit(s_array, log_z_of(keep))
        return np.array([fit.slope, fit.intercept])

    full_fit = linear_fit(s_array, log_z_of(np.ones(n, dtype=bool)))
    _, fit_se, _ = grouped_jackknife(fit_of, n)
    log_z_full, log_z_se, _ = grouped_jackknife(log_z_of, n)

    lam = Estimate(full_fit.slope, float(fit_se[0]), n, (stage.describe(),))
    alpha_inf = Estimate(full_fit.intercept, float(fit_se[1]), n, (stage.describe(),))
    log_z = tuple(Estimate(float(v), float(e), n) for v, e in zip(log_z_full, log_z_se))
    alphas = tuple(Estimate(alpha_s(lz.value, lam.value, s), lz.stderr, n) for lz, s in zip(log_z, s_grid))

    logger.info(
        f"Калибровка λ: β={beta}, λ={lam.value:.6g}±{lam.stderr:.2g}, "
        f"α_∞={alpha_inf.value:.6g}±{alpha_inf.stderr:.2g}, max остаток={full_fit.max_residual:.3g}"
    )
    if full_fit.max_residual > residual_max:
        raise StatisticalGuardError(
            f"Остаток аффинной аппроксимации log Z_s {full_fit.max_residual:.3g} > {residual_max}: "
            f"окно s не вышло на асимптотику"
        )
    return LambdaCalibration(float(beta), field_spec.kernel_id, mode, lam, alpha_inf,
                             (s_grid[0], s_grid[-1]), full_fit.max_residual, s_grid,
                             log_z, alphas, min_ess)


def psi_fk(field_: FieldRealization, s: float, y, beta: float, lam: float,
           n: int, streams, S: float = 0.0, dt: float = DEFAULT_DT) -> Estimate:
    """
    Ψ(s, y; S) = E exp{β𝒱_{s;[0,s+S]}[B] − λ(s+S)} по путям из y

    При S = 0 — задача Коши с данными 1 в момент 0.
    """
    horizon = s + S
    stage = as_stage(streams, 'psi_fk')
    if horizon < -LATTICE_TOL:
        raise ValidationError(f"Отрицательная длина пути s+S={horizon}")
    if horizon <= LATTICE_TOL:
        return Estimate(1.0, 0.0, n, (stage.describe(),))
    field_.require_window(-S, s)

    paths = sample_ensemble(n, np.asarray(y, dtype=float), horizon, 0.0, dt, stage)
    exponent = beta * script_V_batch(field_, s, (0.0, horizon), paths) - lam * horizon
    values = np.exp(exponent)
    if not np.all(np.isfinite(values)):
        raise NumericalError("Переполнение в экспоненте Фейнмана–Каца")
    return Estimate.sample_mean(values, (stage.describe(),))


@dataclass(frozen=True)
class PairMoment:
    """
    E[Ψ(s,y)Ψ(s̃,ỹ)] = e^{α_s+α_s̃}·Ê⊗Ê exp{β²ℛ_{s,s̃}} и сам множитель
    """

    moment: Estimate
    factor: Estimate
    alphas: Tuple[float, float]

    def to_dict(self) -> Dict:
        return {
            'moment': self.moment.to_dict(),
            'factor': self.factor.to_dict(),
            'alphas': list(self.alphas),
        }


def pair_factor_samples(covariance: CovarianceR, s: float, s_tilde: float, y, y_tilde,
                        beta: float, n: int, streams, dt: float = DEFAULT_DT
                        ) -> Tuple[WeightedEnsemble, WeightedEnsemble, np.ndarray]:
    """
    Независимые ансамбли B из y и B̃ из ỹ и перекрёстное ℛ_{s,s̃}[B_i, B̃_i]
    """
    stage = as_stage(streams, 'pair')
    paths = sample_ensemble(n, np.asarray(y, dtype=float), s, 0.0, dt, stage.child('a'))
    paths_t = sample_ensemble(n, np.asarray(y_tilde, dtype=float), s_tilde, 0.0, dt, stage.child('b'))
    ens = tilt(paths, covariance, beta, (0.0, s))
    ens_t = tilt(paths_t, covariance, beta, (0.0, s_tilde))
    cross = overlap_R((0.0, s), (0.0, s_tilde), paths.segment(0.0, s), paths_t.segment(0.0, s_tilde),
                      covariance, dt, lag=s_tilde - s)
    return ens, ens_t, cross


def psi_pair_moment(field_spec: FieldSpec, s: float, s_tilde: float, y, y_tilde,
                    beta: float, lam: float, n: int, streams,
                    alphas: Optional[Tuple[float, float]] = None,
                    dt: float = DEFAULT_DT,
                    ess_floor: float = ESS_FLOOR) -> PairMoment:
    """
    Второй момент пары Ψ через наклонённые ансамбли пар

    Args:
        field_spec: спецификация поля
        s, s_tilde: моменты времени
        y, y_tilde: точки
        beta, lam: параметры уравнения
        n: число пар путей
        streams: источник случайности
        alphas: (α_s, α_s̃); если None — оцениваются по тем же ансамблям

    Returns:
        PairMoment
    """
    stage = as_stage(streams, 'pair')
    if beta == 0.0:
        one = Estimate(1.0, 0.0, n, (stage.describe(),))
        return PairMoment(one, one, (0.0, 0.0))

    ens, ens_t, cross = pair_factor_samples(field_spec.covariance, s, s_tilde, y, y_tilde,
                                            beta, n, stage, dt)
    pair = ens.combined(ens_t)
    factor = tilted_expectation(np.exp(beta ** 2 * cross), pair, ess_floor, (stage.describe(),))

    alpha_se2 = 0.0
    if alphas is None:
        lz, lz_t = log_partition(ens, ess_floor), log_partition(ens_t, ess_floor)
        alphas = (alpha_s(lz.value, lam, s), alpha_s(lz_t.value, lam, s_tilde))
        alpha_se2 = lz.stderr ** 2 + lz_t.stderr ** 2

    prefactor = float(np.exp(alphas[0] + alphas[1]))
    value = prefactor * factor.value
    stderr = float(np.sqrt((prefactor * factor.stderr) ** 2 + value ** 2 * alpha_se2))
    moment = Estimate(value, stderr, n, (stage.describe(),))
    return PairMoment(moment, factor, (float(alphas[0]), float(alphas[1])))
