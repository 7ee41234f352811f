"""
Хранение массивов: плоский бинарный файл float64 + JSON-заголовок рядом
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

BINARY_DTYPE = '<f8'


def array_paths(directory: Union[str, Path], name: str) -> Tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{name}.bin", directory / f"{name}.json"


def save_array(directory: Union[str, Path], name: str, values: np.ndarray, header: Dict) -> Tuple[Path, Path]:
    """
    Сохранение массива и заголовка

    Args:
        directory: директория для файлов
        name: базовое имя файла
        values: массив значений
        header: метаданные (сериализуемые в JSON)

    Returns:
        Пути к .bin и .json
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    bin_path, json_path = array_paths(directory, name)

    values = np.ascontiguousarray(values, dtype=BINARY_DTYPE)
    values.tofile(bin_path)

    meta = dict(header)
    meta['shape'] = list(values.shape)
    meta['dtype'] = 'float64-le'
    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump(meta, f, sort_keys=True, indent=2)

    logger.debug(f"Массив {name} сохранён: {values.shape} -> {bin_path}")
    return bin_path, json_path


def load_array(directory: Union[str, Path], name: str) -> Tuple[np.ndarray, Dict]:
    """
    Загрузка массива и заголовка, сохранённых save_array
    """
    bin_path, json_path = array_paths(directory, name)
    if not bin_path.exists() or not json_path.exists():
        raise ValidationError(f"Не найдены файлы массива {name} в {directory}")

    with open(json_path, 'r', encoding='utf-8') as f:
        header = json.load(f)

    shape = tuple(header['shape'])
    values = np.fromfile(bin_path, dtype=BINARY_DTYPE)
    if values.size != int(np.prod(shape)):
        raise ValidationError(f"Размер {bin_path} не совпадает с заголовком {shape}")
    return values.reshape(shape).astype(float), header
