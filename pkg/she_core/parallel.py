"""
Параллельная обработка ансамблей блоками номеров потоков (joblib)

Разбиение на блоки зависит только от размера ансамбля, поэтому результат
не зависит от числа рабочих.
"""

from __future__ import annotations

import logging
from typing import Callable, List, Sequence, TypeVar

import numpy as np
from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

T = TypeVar('T')


class ParallelSettings:
    """
    Настройки параллелизма; задаются только харнессом
    """

    DEFAULT_BLOCK_SIZE = 256

    def __init__(self):
        self.n_jobs = 1
        self.block_size = self.DEFAULT_BLOCK_SIZE

    def configure(self, n_jobs: int = 1, block_size: int = None):
        self.n_jobs = max(1, int(n_jobs))
        if block_size is not None:
            self.block_size = max(1, int(block_size))
        logger.debug(f"Параллелизм: n_jobs={self.n_jobs}, block_size={self.block_size}")


def stream_blocks(n_items: int, block_size: int) -> List[np.ndarray]:
    """
    Фиксированное разбиение 0..n_items-1 на блоки
    """
    return [np.arange(start, min(start + block_size, n_items))
            for start in range(0, n_items, block_size)]


def map_blocks(func: Callable[[np.ndarray], T],
               n_items: int,
               block_size: int = None) -> List[T]:
    """
    Применение func к блокам номеров потоков с сохранением порядка

    Args:
        func: функция от массива номеров потоков
        n_items: число элементов
        block_size: размер блока (по умолчанию из настроек)

    Returns:
        Список результатов по блокам в порядке номеров
    """
    block_size = block_size or parallel_settings.block_size
    blocks = stream_blocks(n_items, block_size)
    if parallel_settings.n_jobs == 1 or len(blocks) == 1:
        return [func(block) for block in blocks]
    return Parallel(n_jobs=parallel_settings.n_jobs, prefer="threads")(
        delayed(func)(block) for block in blocks
    )


def map_items(func: Callable[[int], T], items: Sequence[int]) -> List[T]:
    """
    Применение func к отдельным элементам (реализации поля и т.п.)
    """
    if parallel_settings.n_jobs == 1 or len(items) <= 1:
        return [func(item) for item in items]
    return Parallel(n_jobs=parallel_settings.n_jobs, prefer="threads")(
        delayed(func)(item) for item in items
    )


# Глобальные настройки параллелизма
parallel_settings = ParallelSettings()
