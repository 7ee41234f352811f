"""
Статистические примитивы: оценка со стандартной ошибкой, групповой
jackknife, z-оценки и линейная аппроксимация
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import StatisticalGuardError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_JACKKNIFE_GROUPS = 20


@dataclass(frozen=True)
class Estimate:
    """
    Универсальный статистический результат: (значение, ст. ошибка, объём, сиды)
    """

    value: float
    stderr: float
    n: int
    seeds: Tuple[str, ...] = ()

    def within(self, target: float, k: float = 4.0, atol: float = 0.0) -> bool:
        """
        Проверка |value − target| ≤ k·stderr + atol
        """
        return abs(self.value - target) <= k * self.stderr + atol

    def scaled(self, factor: float) -> 'Estimate':
        return Estimate(self.value * factor, abs(factor) * self.stderr, self.n, self.seeds)

    def to_dict(self) -> Dict:
        return {
            'value': float(self.value),
            'stderr': float(self.stderr),
            'n': int(self.n),
            'seeds': list(self.seeds),
        }

    @classmethod
    def sample_mean(cls, values: np.ndarray, seeds: Sequence[str] = ()) -> 'Estimate':
        """
        Выборочное среднее с ошибкой std/√n
        """
        values = np.asarray(values, dtype=float).ravel()
        n = values.size
        if n == 0:
            raise ValidationError("Пустая выборка для оценки среднего")
        mean = float(np.sum(values) / n)
        if n == 1:
            return cls(mean, 0.0, 1, tuple(seeds))
        stderr = float(np.sqrt(np.sum((values - mean) ** 2) / (n - 1) / n))
        return cls(mean, stderr, n, tuple(seeds))


def z_score(first: Estimate, second: Estimate) -> float:
    """
    z-оценка расхождения по объединённой стандартной ошибке
    """
    combined = float(np.hypot(first.stderr, second.stderr))
    diff = first.value - second.value
    if combined == 0.0:
        return 0.0 if diff == 0.0 else float('inf')
    return float(abs(diff) / combined)


def pairwise_z_scores(estimates: Dict[str, Estimate]) -> Dict[str, float]:
    """
    Матрица попарных z-оценок в виде словаря 'a|b' -> z
    """
    names = sorted(estimates)
    result = {}
    for i, left in enumerate(names):
        for right in names[i + 1:]:
            result[f"{left}|{right}"] = z_score(estimates[left], estimates[right])
    return result


def jackknife_groups(n: int, n_groups: int = DEFAULT_JACKKNIFE_GROUPS) -> List[np.ndarray]:
    """
    Разбиение индексов 0..n-1 на непрерывные блоки для группового jackknife
    """
    n_groups = max(2, min(n_groups, n))
    return [block for block in np.array_split(np.arange(n), n_groups) if block.size]


def grouped_jackknife(statistic: Callable[[np.ndarray], np.ndarray],
                      n: int,
                      n_groups: int = DEFAULT_JACKKNIFE_GROUPS) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Групповой jackknife для произвольной статистики

    Args:
        statistic: функция от булевой маски оставленных элементов
        n: размер выборки
        n_groups: число групп

    Returns:
        (значение на полной выборке, стандартная ошибка, реплики)
    """
    if n < 2:
        raise StatisticalGuardError("Для jackknife нужно хотя бы 2 наблюдения")
    full = np.asarray(statistic(np.ones(n, dtype=bool)), dtype=float)
    replicates = []
    for block in jackknife_groups(n, n_groups):
        keep = np.ones(n, dtype=bool)
        keep[block] = False
        replicates.append(np.asarray(statistic(keep), dtype=float))
    replicates = np.stack(replicates)
    g = replicates.shape[0]
    centered = replicates - replicates.mean(axis=0)
    stderr = np.sqrt((g - 1) / g * np.sum(centered ** 2, axis=0))
    return full, stderr, replicates


def jackknife_stderr(replicates: np.ndarray) -> np.ndarray:
    """
    Стандартная ошибка по готовым jackknife-репликам (по первой оси)
    """
    replicates = np.asarray(replicates, dtype=float)
    g = replicates.shape[0]
    centered = replicates - replicates.mean(axis=0)
    return np.sqrt((g - 1) / g * np.sum(centered ** 2, axis=0))


@dataclass(frozen=True)
class LinearFit:
    """
    Результат линейной аппроксимации y ≈ intercept + slope·x
    """

    slope: float
    intercept: float
    slope_stderr: float
    intercept_stderr: float
    residuals: Tuple[float, ...] = field(default_factory=tuple)
    n_points: int = 0

    @property
    def max_residual(self) -> float:
        return float(max((abs(r) for r in self.residuals), default=0.0))

    @property
    def indicative(self) -> bool:
        # на трёх и менее точках наклон лишь ориентировочный
        return self.n_points <= 3

    def to_dict(self) -> Dict:
        return {
            'slope': float(self.slope),
            'intercept': float(self.intercept),
            'slope_stderr': float(self.slope_stderr),
            'intercept_stderr': float(self.intercept_stderr),
            'max_residual': self.max_residual,
            'n_points': int(self.n_points),
            'indicative': self.indicative,
        }


def linear_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """
    Обычный МНК через scipy.stats.linregress

    Args:
        x: абсциссы (≥ 2 различных)
        y: ординаты

    Returns:
        LinearFit с остатками
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2 or np.unique(x).size < 2:
        raise StatisticalGuardError("Для линейной аппроксимации нужно хотя бы 2 различные точки")
    if not np.all(np.isfinite(y)):
        raise StatisticalGuardError("Нечисловые значения в аппроксимируемых данных")
    if x.size == 2:
        slope = (y[1] - y[0]) / (x[1] - x[0])
        intercept = y[0] - slope * x[0]
        return LinearFit(float(slope), float(intercept), 0.0, 0.0, (0.0, 0.0), 2)
    result = stats.linregress(x, y)
    residuals = y - (result.intercept + result.slope * x)
    return LinearFit(
        slope=float(result.slope),
        intercept=float(result.intercept),
        slope_stderr=float(result.stderr),
        intercept_stderr=float(result.intercept_stderr),
        residuals=tuple(float(r) for r in residuals),
        n_points=int(x.size),
    )


def loglog_fit(x: Sequence[float], y: Sequence[float]) -> LinearFit:
    """
    Аппроксимация наклона в координатах log–log
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise StatisticalGuardError("log–log аппроксимация требует положительных данных")
    return linear_fit(np.log(x), np.log(y))


def ratio_estimate(numerators: np.ndarray,
                   denominators: np.ndarray,
                   seeds: Sequence[str] = ()) -> Tuple[Estimate, Estimate]:
    """
    Отношение средних с дельта-методом

    Returns:
        (оценка отношения, оценка знаменателя)
    """
    num = np.asarray(numerators, dtype=float)
    den = np.asarray(denominators, dtype=float)
    n = num.size
    if n < 2:
        raise StatisticalGuardError("Для отношения средних нужно хотя бы 2 реализации")
    mean_num = float(np.sum(num) / n)
    mean_den = float(np.sum(den) / n)
    den_est = Estimate.sample_mean(den, seeds)
    if mean_den == 0.0:
        raise StatisticalGuardError("Нулевой знаменатель в отношении средних")
    ratio = mean_num / mean_den
    linearized = (num - ratio * den) / mean_den
    stderr = float(np.sqrt(np.sum(linearized ** 2) / (n - 1) / n))
    return Estimate(ratio, stderr, n, tuple(seeds)), den_est


def optional_dict(estimate: Optional[Estimate]) -> Optional[Dict]:
    return None if estimate is None else estimate.to_dict()
