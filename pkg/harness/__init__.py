"""
harness — конфигурация, запуск экспериментов и отчёты

Содержит:
- config: ExperimentConfig (значения по умолчанию, файл KEY=value, окружение SHE_*)
- manifest: манифест запуска с индексом выходных файлов
- stages: последовательный исполнитель этапов со статусами
- reports: запись CSV и JSON
- commands: реестр команд экспериментов
- cli: разбор аргументов командной строки и коды выхода
"""

from .config import ExperimentConfig, load_config, CONFIG_SCHEMA
from .manifest import RunManifest
from .stages import StageRunner
from .commands import COMMANDS, RunContext
from .cli import main, run_command

__version__ = "1.0.0"

__all__ = [
    'ExperimentConfig',
    'load_config',
    'CONFIG_SCHEMA',
    'RunManifest',
    'StageRunner',
    'COMMANDS',
    'RunContext',
    'main',
    'run_command',
]
