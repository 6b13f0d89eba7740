"""
lifespan.py — жизненный цикл одного запуска CLI.

Задачи:
- Настройка логирования (уровень из MRICOLOR_LOG_LEVEL или -v)
- Фиксация seed'ов и детерминированных алгоритмов torch
- Создание каталога результатов и запись resolved_config.json (команда, аргументы, конфиг)
"""

# --- Стандартные библиотеки ---
import logging                          # Отслеживание работы/диагностика проблем
import random
from contextlib import contextmanager   # для запуска/завершения команды
from dataclasses import dataclass
from pathlib import Path

# --- Сторонние библиотеки ---
import numpy as np
import torch

# --- Модули проекта ---
from app.core.config import LOG_LEVEL, run_document
from app.core.helpers import write_json

RESOLVED_CONFIG_NAME = "resolved_config.json"


@dataclass
class RunContext:
    command: str
    out_dir: Path
    config: object = None


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(message)s",
        force=True,
    )


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


@contextmanager
def lifespan(command: str, out_dir, config=None, verbose: bool = False, seed: int = 0, args: dict | None = None):
    """
    Контекстный менеджер запуска команды.
    Манифест запуска (команда, аргументы и конфиг после переопределений) пишется
    рядом с результатами до начала работы, чтобы по нему одному можно было повторить запуск.
    """

    # Startup
    configure_logging(verbose)
    seed_everything(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config is not None:
        write_json(out_dir / RESOLVED_CONFIG_NAME, run_document(command, args or {}, config))
    logging.info("Команда %s: результаты в %s", command, out_dir)

    yield RunContext(command=command, out_dir=out_dir, config=config)

    # Shutdown
    logging.info("Команда %s завершена", command)
