"""
Воспроизводимые счётчиковые потоки случайных чисел

Каждый поток однозначно задаётся тройкой (корневой сид, этап, номер потока)
и не зависит от числа рабочих потоков и порядка вычислений.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

logger = logging.getLogger(__name__)


def stage_key(stage: str) -> int:
    """
    Стабильный 64-битный ключ этапа (не зависит от PYTHONHASHSEED)
    """
    digest = hashlib.sha256(stage.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


@dataclass(frozen=True)
class StageStreams:
    """
    Потоки одного этапа эксперимента
    """

    root: int
    stage: str

    @property
    def key(self) -> int:
        return stage_key(self.stage)

    def seed_sequence(self, stream_id: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.root, spawn_key=(self.key, int(stream_id)))

    def generator(self, stream_id: int) -> np.random.Generator:
        """
        Генератор Philox для потока stream_id
        """
        return np.random.Generator(np.random.Philox(self.seed_sequence(stream_id)))

    def child(self, suffix: str) -> 'StageStreams':
        return StageStreams(self.root, f"{self.stage}/{suffix}")

    def describe(self) -> str:
        return f"{self.root}:{self.stage}"


@dataclass(frozen=True)
class RandomStreams:
    """
    Фабрика потоков, привязанная к корневому сиду запуска
    """

    root: int

    def stage(self, name: str) -> StageStreams:
        return StageStreams(int(self.root), name)

    def generator(self, stage: str, stream_id: int) -> np.random.Generator:
        return self.stage(stage).generator(stream_id)

    def describe(self, stage: str) -> Tuple[int, str, int]:
        return (int(self.root), stage, stage_key(stage))


def as_stage(streams, default_stage: str) -> StageStreams:
    """
    Приведение RandomStreams / StageStreams / int к StageStreams
    """
    if isinstance(streams, StageStreams):
        return streams
    if isinstance(streams, RandomStreams):
        return streams.stage(default_stage)
    if isinstance(streams, (int, np.integer)):
        return StageStreams(int(streams), default_stage)
    raise TypeError(f"Неподдерживаемый источник случайности: {type(streams)!r}")
