"""
Последовательный запуск этапов эксперимента со статусами и коллбэками
"""

import logging
import time
from typing import Any, Callable, Dict, List, Optional

from she_core.rng import StageStreams

from .manifest import RunManifest

logger = logging.getLogger(__name__)

EVENTS = ('on_start', 'on_progress', 'on_complete', 'on_error')


class StageRunner:
    """
    Класс для пошагового выполнения этапов с учётом времени и сидов

    Каждый этап получает собственный поток случайности; статус этапов
    хранится в словаре и попадает в манифест.
    """

    def __init__(self, manifest: RunManifest, streams):
        """
        Args:
            manifest: манифест запуска
            streams: RandomStreams корневого сида
        """
        self.manifest = manifest
        self.streams = streams
        self.status: Dict[str, Dict[str, Any]] = {}
        self.order: List[str] = []
        self.callbacks: Dict[str, List[Callable[[Dict], None]]] = {event: [] for event in EVENTS}

    def add_callback(self, event_type: str, callback: Callable[[Dict], None]):
        """
        Добавление коллбэка для событий

        Args:
            event_type: тип события (on_start, on_progress, on_complete, on_error)
            callback: функция коллбэка
        """
        if event_type in self.callbacks:
            self.callbacks[event_type].append(callback)

    def _notify(self, event_type: str, data: Dict):
        for callback in self.callbacks.get(event_type, []):
            try:
                callback(data)
            except Exception as e:
                logger.error(f"Ошибка в коллбэке {event_type}: {e}")

    def stage_streams(self, name: str) -> StageStreams:
        return self.streams.stage(name)

    def run(self, name: str, func: Callable[[StageStreams], Any]) -> Any:
        """
        Выполнение этапа

        Args:
            name: имя этапа (оно же ключ потока случайности)
            func: функция этапа от потоков этапа

        Returns:
            Результат func; исключения пробрасываются после записи статуса
        """
        stage = self.stage_streams(name)
        index = len(self.order) + 1
        self.order.append(name)
        self.status[name] = {'status': 'processing', 'index': index, 'start_time': time.time()}
        logger.info(f"Шаг {index}: {name}")
        self._notify('on_start', {'stage': name, 'index': index})
        started = time.perf_counter()
        try:
            result = func(stage)
        except Exception as e:
            self._fail(name, stage, started, e)
            raise
        seconds = time.perf_counter() - started
        self.manifest.record_stage(name, stage.describe(), seconds)
        self.status[name].update({'status': 'completed', 'seconds': seconds})
        self._notify('on_complete', {'stage': name, 'seconds': seconds})
        logger.info(f"Этап {name} завершён за {seconds:.1f} с")
        return result

    def progress(self, name: str, message: str, fraction: Optional[float] = None):
        """Ход длинного этапа: сообщение и доля выполненного попадают в статус и в on_progress"""
        logger.debug(f"{name}: {message} ({'?' if fraction is None else f'{fraction:.0%}'})")
        if name in self.status:
            self.status[name].update({'message': message, 'progress': fraction})
        self._notify('on_progress', {'stage': name, 'message': message, 'progress': fraction})

    def _fail(self, name: str, stage: StageStreams, started: float, error: Exception):
        seconds = time.perf_counter() - started
        self.manifest.record_stage(name, stage.describe(), seconds)
        kind = getattr(error, 'kind', 'error')
        self.status[name].update({'status': 'error', 'error': str(error), 'kind': kind, 'seconds': seconds})
        self._notify('on_error', {'stage': name, 'error': str(error), 'kind': kind})
        logger.error(f"Этап {name} завершён с ошибкой ({kind}): {error}")

    def summary(self) -> Dict[str, Dict[str, Any]]:
        return {name: {k: v for k, v in self.status[name].items() if k != 'start_time'} for name in self.order}
