"""
rerun — повтор запуска по манифесту resolved_config.json.
"""

# --- Стандартные библиотеки ---
import argparse
import logging                          # Отслеживание работы/диагностика проблем

# --- Модули проекта ---
from app.core.errors import ConfigError
from app.core.helpers import read_json

NAME = "rerun"


def register(subparsers, handlers: dict):
    parser = subparsers.add_parser(NAME, help="повторить запуск по resolved_config.json")
    parser.add_argument("manifest", help="манифест запуска (resolved_config.json)")
    parser.add_argument("-v", "--verbose", action="store_true", help="логирование DEBUG")
    parser.set_defaults(handler=lambda args: run(args, handlers))


def run(args, handlers: dict) -> int:
    """
    Восстанавливает аргументы исходной команды из манифеста.
    Конфиг читается из того же файла (load_config понимает манифест запуска).
    """
    try:
        document = read_json(args.manifest)
    except ValueError as e:
        raise ConfigError(f"манифест запуска не читается: {e}") from e
    if not isinstance(document, dict) or "command" not in document or "args" not in document:
        raise ConfigError(f"{args.manifest}: это не манифест запуска (нет command/args)")

    command = document["command"]
    if command not in handlers:
        raise ConfigError(f"{args.manifest}: неизвестная команда {command!r}")

    replayed = argparse.Namespace(
        **document["args"], config=args.manifest, overrides=[], verbose=args.verbose, command=command,
    )
    logging.info("Повтор команды %s по манифесту %s", command, args.manifest)
    return handlers[command](replayed)
