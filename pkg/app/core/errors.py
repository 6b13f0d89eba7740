"""
errors.py — иерархия исключений проекта.

Библиотечный код бросает эти исключения, CLI переводит их в коды возврата
(ColorizationError/OSError -> 2, ошибки использования -> 1).
"""


class ColorizationError(Exception):
    """Базовое исключение всех ошибок пайплайна колоризации."""


class ConfigError(ColorizationError, ValueError):
    """Невалидная конфигурация (параметры фантома, флаги абляции или переопределения)."""


class ShapeError(ColorizationError, ValueError):
    """Несовпадение каналов или пространственных размеров."""


class DatasetError(ColorizationError):
    """Отсутствующий или повреждённый файл датасета."""

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class CheckpointError(ColorizationError):
    """Чекпоинт не читается или не совпадает отпечаток архитектуры."""

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class TrainingError(ColorizationError):
    """Шаг обучения прерван (NaN/Inf в лоссах)."""

    def __init__(self, message, bundle=None, sample_ids=None):
        super().__init__(message)
        self.bundle      = bundle or {}        # значения лоссов на момент сбоя
        self.sample_ids  = list(sample_ids or [])
