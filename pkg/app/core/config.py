"""
Конфигурация проекта.
Содержит настройки из переменных окружения (устройство, каталоги, шаблоны отчётов)
и разбор версионированных JSON-конфигов экспериментов с переопределениями
вида "section.key=value".
"""

from __future__ import annotations

# --- Стандартные библиотеки ---
import dataclasses                  # Схема конфигов описана датаклассами
import json                         # Формат конфигов и переопределений
import os                           # Для работы с переменными окружения
import types
import typing
from pathlib import Path

# --- Модули проекта ---
from app.core.errors import ConfigError


# --- Настройки из переменных окружения ---
DEVICE    = os.getenv("MRICOLOR_DEVICE", "cpu")      # устройство по умолчанию (cpu / cuda / cuda:1)
LOG_LEVEL = os.getenv("MRICOLOR_LOG_LEVEL", "INFO")
DATA_DIR  = os.getenv("MRICOLOR_DATA_DIR", "data")
RUNS_DIR  = os.getenv("MRICOLOR_RUNS_DIR", "runs")

# --- Пути к шаблонам отчётов ---
TEMPLATES_DIR = os.getenv(
    "TEMPLATES_DIR", str(Path(__file__).resolve().parent.parent / "web" / "templates")
)

# --- Версии форматов на диске ---
CONFIG_VERSION     = 1
MANIFEST_VERSION   = 1
CHECKPOINT_VERSION = 1


def to_dict(obj) -> dict:
    """Датакласс -> словарь, пригодный для JSON (кортежи становятся списками)."""
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def from_dict(cls, data: dict, prefix: str = ""):
    """
    Собирает датакласс cls из словаря с проверкой ключей и типов.
    Отсутствующие ключи берутся из значений по умолчанию, неизвестные отклоняются.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"секция '{prefix or cls.__name__}' должна быть объектом")

    hints  = typing.get_type_hints(cls)
    known  = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"неизвестный ключ конфигурации: {prefix}{key}")
        kwargs[key] = _coerce(value, hints[key], f"{prefix}{key}")
    return cls(**kwargs)


def _coerce(value, hint, key):
    """Приводит значение к аннотации поля или бросает ConfigError."""
    origin = typing.get_origin(hint)
    args   = typing.get_args(hint)

    if dataclasses.is_dataclass(hint):
        return from_dict(hint, value, prefix=f"{key}.")

    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        for option in (a for a in args if a is not type(None)):
            try:
                return _coerce(value, option, key)
            except ConfigError:
                continue
        raise ConfigError(f"{key}: значение {value!r} не подходит под {hint}")

    if origin is typing.Literal:
        if value not in args:
            raise ConfigError(f"{key}: допустимые значения {list(args)}, получено {value!r}")
        return value

    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: ожидается список, получено {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], key) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{key}: ожидается {len(args)} элементов, получено {len(value)}")
        return tuple(_coerce(v, a, key) for v, a in zip(value, args))

    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: ожидается bool, получено {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: ожидается int, получено {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: ожидается число, получено {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: ожидается строка, получено {value!r}")
        return value
    return value


def parse_override(text: str) -> tuple[list[str], object]:
    """
    Разбирает переопределение "section.key=value".
    Значение читается как JSON (1e-3, true, [1, 2]), иначе остаётся строкой.
    """
    if "=" not in text:
        raise ConfigError(f"переопределение без '=': {text!r}")
    dotted, raw = text.split("=", 1)
    path = [part for part in dotted.strip().split(".") if part]
    if not path:
        raise ConfigError(f"пустой ключ в переопределении: {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(obj, overrides):
    """Возвращает копию датакласса obj с применёнными переопределениями."""
    data = to_dict(obj)
    for text in overrides:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"неизвестный ключ конфигурации: {'.'.join(path)}")
            node = node[part]
        if path[-1] not in node:
            raise ConfigError(f"неизвестный ключ конфигурации: {'.'.join(path)}")
        node[path[-1]] = value
    return from_dict(type(obj), data)


def load_config(cls, path=None, overrides=()):
    """
    Читает JSON-конфиг (если задан), проверяет версию и применяет переопределения.
    Без файла берутся значения по умолчанию.
    """
    if path is None:
        obj = cls()
    else:
        try:
            with open(path, encoding="utf-8") as f:
                document = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"не удалось прочитать конфиг {path}: {e}") from e

        version = document.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"версия конфига {version} не поддерживается (ожидается {CONFIG_VERSION})")
        if "config" in document:
            # манифест запуска: конфиг лежит рядом с командой и аргументами
            document = document["config"]
        obj = from_dict(cls, document)

    return apply_overrides(obj, overrides) if overrides else obj


def config_document(obj) -> dict:
    """Полный документ конфига с версией (формат файла --config)."""
    return {"version": CONFIG_VERSION, **to_dict(obj)}


def run_document(command: str, args: dict, obj) -> dict:
    """
    Манифест запуска (resolved_config.json): команда, её аргументы и полный конфиг.
    По нему одному команда повторяется через `rerun`.
    """
    return {"version": CONFIG_VERSION, "command": command, "args": args, "config": to_dict(obj)}
