"""
Запись табличных (CSV) и структурированных (JSON) результатов
"""

import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)


def _plain(value: Any) -> Any:
    """Приведение numpy-типов и кортежей к сериализуемому виду"""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def format_cell(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Union[str, Path], rows: Sequence[Dict[str, Any]],
              columns: Sequence[str] = None) -> Path:
    """
    CSV со строкой заголовка; порядок столбцов — из первой строки или columns
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(c)) for c in columns])
    logger.debug(f"Записан CSV {path} ({len(rows)} строк)")
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    """
    JSON с отсортированными ключами (байтово воспроизводимый)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(_plain(payload), f, sort_keys=True, indent=2, ensure_ascii=False)
        f.write('\n')
    logger.debug(f"Записан JSON {path}")
    return path


def file_digest(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()
