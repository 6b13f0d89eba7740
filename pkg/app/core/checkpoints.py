"""
checkpoints.py — хранилище чекпоинтов обучения.

Включает:
- Атомарную запись чекпоинта (временный файл + переименование)
- Чтение с проверкой версии формата и отпечатка архитектуры
- Поиск последнего чекпоинта запуска для резюме
"""

# --- Стандартные библиотеки ---
import logging                          # Отслеживание работы/диагностика проблем
import pickle
import re
from pathlib import Path

# --- Сторонние библиотеки ---
import torch                            # Сериализация state_dict моделей и оптимизаторов

# --- Модули проекта ---
from app.core.config import CHECKPOINT_VERSION
from app.core.errors import CheckpointError
from app.core.helpers import atomic_write

FINAL_NAME = "final.pt"
_STEP_RE   = re.compile(r"step_(\d+)\.pt$")


def checkpoint_name(step: int) -> str:
    return f"step_{step:08d}.pt"


def save_checkpoint(path, payload: dict) -> Path:
    """
    Сохраняет чекпоинт. payload должен содержать fingerprint.
    Возвращает путь записанного файла.
    """
    path = Path(path)
    document = {"version": CHECKPOINT_VERSION, **payload}
    try:
        atomic_write(path, lambda f: torch.save(document, f), mode="wb")
        logging.info("Чекпоинт сохранён: %s", path)
        return path
    except OSError as e:
        logging.error("Ошибка при сохранении чекпоинта %s: %s", path, e)
        raise


def load_checkpoint(path, expected_fingerprint=None, map_location="cpu") -> dict:
    """
    Загружает чекпоинт. При несовпадении отпечатка архитектуры — CheckpointError
    (веса другой архитектуры не подгружаются даже частично).
    """
    path = Path(path)
    try:
        document = torch.load(path, map_location=map_location, weights_only=True)
    except (OSError, RuntimeError, ValueError, pickle.UnpicklingError, EOFError) as e:
        logging.error("Ошибка при чтении чекпоинта %s: %s", path, e)
        raise CheckpointError(f"чекпоинт не читается ({e})", path) from e

    if not isinstance(document, dict) or document.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("неподдерживаемый формат чекпоинта", path)
    if expected_fingerprint is not None and document.get("fingerprint") != expected_fingerprint:
        raise CheckpointError(
            f"отпечаток архитектуры {document.get('fingerprint', '')[:12]} "
            f"не совпадает с конфигом {expected_fingerprint[:12]}",
            path,
        )
    logging.info("Чекпоинт загружен: %s (шаг %s)", path, document.get("step"))
    return document


def latest_checkpoint(directory):
    """Последний по номеру шага чекпоинт каталога (или None)."""
    directory = Path(directory)
    if not directory.is_dir():
        return None
    steps = []
    for path in directory.iterdir():
        match = _STEP_RE.search(path.name)
        if match:
            steps.append((int(match.group(1)), path))
    return max(steps)[1] if steps else None
