"""
main.py — точка входа CLI: python -m app.main <команда> [аргументы].

Коды возврата: 0 — успех, 1 — ошибка использования (печатается схема конфига),
2 — ошибка выполнения (ColorizationError, OSError).
"""

# --- Стандартные библиотеки ---
import argparse                         # Разбор команд и аргументов
import logging                          # Отслеживание работы/диагностика проблем
import sys

# --- Модули проекта ---
from app.commands import register_commands
from app.commands.common import schema_help
from app.core.errors import ColorizationError, ConfigError


class UsageError(Exception):
    """Неверные аргументы командной строки."""


class CommandParser(argparse.ArgumentParser):
    """argparse без sys.exit(2) на ошибках: код возврата решает main."""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> CommandParser:
    parser = CommandParser(prog="mricolor", description="Структурно согласованная колоризация MRI")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=CommandParser)
    register_commands(subparsers)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args)
    except SystemExit as e:
        # --help
        return int(e.code or 0)
    except (UsageError, ConfigError) as e:
        print(f"ошибка: {e}", file=sys.stderr)
        print(schema_help(), file=sys.stderr)
        return 1
    except (ColorizationError, OSError) as e:
        logging.error("Ошибка выполнения: %s", e)
        print(f"ошибка: {e}", file=sys.stderr)
        return 2


# Запуск напрямую (python -m app.main)
if __name__ == "__main__":
    sys.exit(main())
