"""
Манифест запуска: хеш конфигурации, версия, сиды этапов, время этапов и
индекс всех выходных файлов с sha256
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from .reports import file_digest, write_json

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = "1.0.0"
MANIFEST_NAME = 'manifest.json'


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    out_dir: Path
    version: str = ARTIFACT_VERSION
    stage_seeds: Dict[str, str] = field(default_factory=dict)
    stage_seconds: Dict[str, float] = field(default_factory=dict)
    outputs: List[Path] = field(default_factory=list)

    def add_output(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        if path not in self.outputs:
            self.outputs.append(path)
        return path

    def record_stage(self, name: str, seeds: str, seconds: float):
        self.stage_seeds[name] = seeds
        self.stage_seconds[name] = float(seconds)

    def index(self) -> List[Dict[str, str]]:
        """Индекс выходов: путь относительно каталога запуска и sha256"""
        return [{'file': str(p.relative_to(self.out_dir)), 'sha256': file_digest(p)}
                for p in sorted(self.outputs)]

    def deterministic_part(self) -> Dict:
        """Часть манифеста, не зависящая от времени выполнения"""
        return {
            'command': self.command,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'version': self.version,
            'stage_seeds': dict(self.stage_seeds),
            'outputs': self.index(),
        }

    def to_dict(self) -> Dict:
        payload = self.deterministic_part()
        payload['wall_clock_seconds'] = dict(self.stage_seconds)
        return payload

    def write(self, path: Optional[Union[str, Path]] = None) -> Path:
        path = Path(path) if path is not None else self.out_dir / MANIFEST_NAME
        written = write_json(path, self.to_dict())
        logger.info(f"Манифест записан: {written} ({len(self.outputs)} файлов)")
        return written
