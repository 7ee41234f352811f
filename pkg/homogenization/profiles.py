"""
Начальные данные u₀ и тестовые функции g
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Dict, Optional

import numpy as np

from she_core.errors import ValidationError
from she_core.grid_pde import homogenized_u

logger = logging.getLogger(__name__)


class Profile(ABC):
    """
    Базовый класс профиля: значения и градиент в точках формы (..., d)
    """

    def __init__(self, dimension: int = 3):
        self.dimension = int(dimension)

    @abstractmethod
    def value(self, x: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def gradient(self, x: np.ndarray) -> np.ndarray:
        pass

    def evolved(self, a: float, t: float) -> Optional['Profile']:
        """
        Профиль после тепловой эволюции с диффузией a за время t,
        если он известен в замкнутом виде
        """
        return None

    @property
    def is_constant(self) -> bool:
        return False

    def describe(self) -> Dict:
        return {'type': type(self).__name__, 'dimension': self.dimension}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.value(x)


class GaussianProfile(Profile):
    """
    A·exp{−|x|²/(2σ²)}, при заданном cutoff — ноль вне шара радиуса cutoff
    """

    def __init__(self, sigma: float, dimension: int = 3, amplitude: float = 1.0,
                 cutoff: Optional[float] = None):
        super().__init__(dimension)
        if sigma <= 0:
            raise ValidationError(f"Ширина гауссова профиля должна быть положительной, получено {sigma}")
        self.sigma = float(sigma)
        self.amplitude = float(amplitude)
        self.cutoff = None if cutoff is None else float(cutoff)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r2 = np.sum(x ** 2, axis=-1)
        out = self.amplitude * np.exp(-r2 / (2.0 * self.sigma ** 2))
        if self.cutoff is not None:
            out = np.where(r2 <= self.cutoff ** 2, out, 0.0)
        return out

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return -x / self.sigma ** 2 * self.value(x)[..., None]

    def integral(self) -> float:
        """∫g без учёта обрезки"""
        return self.amplitude * (2.0 * np.pi * self.sigma ** 2) ** (self.dimension / 2.0)

    def evolved(self, a: float, t: float) -> Optional['Profile']:
        if self.cutoff is not None:
            return None
        var = self.sigma ** 2 + a * t
        amplitude = self.amplitude * (self.sigma ** 2 / var) ** (self.dimension / 2.0)
        return GaussianProfile(np.sqrt(var), self.dimension, amplitude)

    def describe(self) -> Dict:
        return {
            'type': 'gaussian',
            'dimension': self.dimension,
            'sigma': self.sigma,
            'amplitude': self.amplitude,
            'cutoff': self.cutoff,
        }


class ConstantProfile(Profile):
    def __init__(self, constant: float = 1.0, dimension: int = 3):
        super().__init__(dimension)
        self.constant = float(constant)

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1], self.constant)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.zeros(np.asarray(x).shape)

    def evolved(self, a: float, t: float) -> Optional['Profile']:
        return self

    @property
    def is_constant(self) -> bool:
        return True

    def describe(self) -> Dict:
        return {'type': 'constant', 'dimension': self.dimension, 'constant': self.constant}


class AffineProfile(Profile):
    """
    c₀ + v·x; тепловая эволюция его не меняет
    """

    def __init__(self, slope, offset: float = 0.0):
        slope = np.asarray(slope, dtype=float)
        super().__init__(slope.size)
        self.slope = slope
        self.offset = float(offset)

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.offset + np.asarray(x, dtype=float) @ self.slope

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.slope, x.shape).copy()

    def evolved(self, a: float, t: float) -> Optional['Profile']:
        return self

    def describe(self) -> Dict:
        return {'type': 'affine', 'dimension': self.dimension,
                'slope': self.slope.tolist(), 'offset': self.offset}


def gaussian_test_function(sigma: float = 0.25, dimension: int = 3, amplitude: float = 1.0) -> GaussianProfile:
    """
    Тестовая функция g: гауссиана, обрезанная на 4σ
    """
    return GaussianProfile(sigma, dimension, amplitude, cutoff=4.0 * sigma)


def make_profile(kind: str, dimension: int = 3, sigma: float = 1.0, amplitude: float = 1.0) -> Profile:
    """
    Профиль начальных данных по названию из конфигурации
    """
    if kind == 'gaussian':
        return GaussianProfile(sigma, dimension, amplitude)
    if kind == 'constant':
        return ConstantProfile(amplitude, dimension)
    raise ValidationError(f"Неизвестный профиль начальных данных '{kind}'")


class Homogenized:
    """
    Решение ū однородного уравнения ∂ū = ½aΔū с данными u₀

    Значения и градиент берутся в замкнутом виде, если профиль это
    допускает, иначе свёрткой с G_a по квадратуре.
    """

    def __init__(self, u0: Profile, a: float, order: int = 20):
        if a <= 0:
            raise ValidationError(f"Диффузия должна быть положительной, получено a={a}")
        self.u0 = u0
        self.a = float(a)
        self.order = order

    def value(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        closed = self.u0.evolved(self.a, t)
        if closed is not None:
            return closed.value(x)
        flat = x.reshape(-1, x.shape[-1])
        return homogenized_u(self.u0.value, self.a, t, flat, self.order).reshape(x.shape[:-1])

    def gradient(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        closed = self.u0.evolved(self.a, t)
        if closed is not None:
            return closed.gradient(x)
        flat = x.reshape(-1, x.shape[-1])
        components = [
            homogenized_u(lambda z, k=k: self.u0.gradient(z)[..., k], self.a, t, flat, self.order)
            for k in range(x.shape[-1])
        ]
        return np.stack(components, axis=-1).reshape(x.shape)
