"""
Пакет команд CLI: каждая команда регистрирует свой sub-parser.
"""

# --- Модули проекта ---
from . import ablate, evaluate, gen_data, infer, rerun, train, train_seg

COMMANDS = (gen_data, train_seg, train, infer, evaluate, ablate)

# имя команды -> обработчик (для повтора по манифесту запуска)
HANDLERS = {command.NAME: command.run for command in COMMANDS}


def register_commands(subparsers):
    for command in COMMANDS:
        command.register(subparsers)
    rerun.register(subparsers, HANDLERS)
