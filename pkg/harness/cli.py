"""
Командная строка: python main.py <команда> --config <файл> --out <каталог> --seed <u64> --threads <n>
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

from she_core.errors import SheLabError
from she_core.parallel import parallel_settings

from .commands import COMMANDS, RunContext
from .config import ExperimentConfig, load_config
from .manifest import RunManifest
from .stages import StageRunner

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_GUARD = 3


def setup_logging():
    """
    Настройка корневого логгера; SHE_DEBUG=true включает DEBUG
    """
    debug_mode = os.getenv('SHE_DEBUG', 'false').lower() == 'true'
    logging.basicConfig(
        level=logging.DEBUG if debug_mode else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='she-lab',
        description='Численная лаборатория перенормированного стохастического уравнения теплопроводности'
    )
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=f"эксперимент {name}")
        cmd.add_argument('--config', help='файл конфигурации KEY=value')
        cmd.add_argument('--out', help='каталог результатов')
        cmd.add_argument('--seed', type=int, help='корневой сид')
        cmd.add_argument('--threads', type=int, help='число рабочих потоков')
        cmd.add_argument('--dump-config', action='store_true',
                         help='напечатать итоговую конфигурацию и выйти')
    template = sub.add_parser('template', help='записать шаблон конфигурации')
    template.add_argument('path', nargs='?', help='куда записать шаблон')
    return parser


def run_command(name: str, config: ExperimentConfig) -> Dict:
    """
    Выполнение команды с валидацией конфигурации и записью манифеста

    Returns:
        Словарь результата; при ошибке — {'success': False, 'error', 'stage', 'exit_code'}
    """
    validation = config.validate_config(name)
    for warning in validation['warnings']:
        logger.warning(warning)
    if not validation['valid']:
        for issue in validation['issues']:
            logger.error(f"Конфигурация: {issue}")
        return {'success': False, 'error': '; '.join(validation['issues']), 'stage': 'validation',
                'exit_code': EXIT_VALIDATION}

    run = config.section('run')
    parallel_settings.configure(run['threads'], run['block_size'])
    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(name, config.config_hash(), config.seed, out_dir)
    runner = StageRunner(manifest, config.streams())
    ctx = RunContext(config, manifest, runner)

    logger.info(f"=== Запуск {name}: сид {config.seed}, потоков {run['threads']}, вывод {out_dir} ===")
    try:
        result = COMMANDS[name](ctx)
    except SheLabError as e:
        failed = next((s for s in reversed(runner.order) if runner.status[s]['status'] == 'error'), None)
        logger.error(f"Команда {name} прервана: {e}")
        result = {'success': False, 'error': str(e), 'stage': failed, 'kind': e.kind,
                  'exit_code': e.exit_code}
    manifest.write()
    result.setdefault('exit_code', EXIT_OK)
    result['stages'] = runner.summary()
    return result


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)

    if args.command == 'template':
        path = ExperimentConfig(use_env=False).save_config_template(args.path)
        print(f"Шаблон конфигурации записан в {path}")
        return EXIT_OK

    try:
        config = load_config(args.config, seed=args.seed, threads=args.threads, out=args.out)
    except SheLabError as e:
        logger.error(f"Ошибка конфигурации: {e}")
        return EXIT_VALIDATION

    if args.dump_config:
        print(json.dumps(config.to_dict(), indent=2, ensure_ascii=False, sort_keys=True))
        return EXIT_OK

    result = run_command(args.command, config)
    if result['success']:
        logger.info(f"Команда {args.command} выполнена успешно")
    return int(result['exit_code'])


if __name__ == '__main__':
    sys.exit(main())
