"""
common.py — общие аргументы и помощники команд CLI.
"""

# --- Стандартные библиотеки ---
from pathlib import Path

# --- Модули проекта ---
from app.colorization.experiment import ExperimentConfig
from app.core.checkpoints import FINAL_NAME, latest_checkpoint
from app.core.config import RUNS_DIR, load_config, to_dict
from app.core.errors import CheckpointError


def add_config_args(parser) -> None:
    parser.add_argument("--config", help="JSON-конфиг эксперимента (версия 1)")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="переопределение ключа конфига, можно несколько раз",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="логирование DEBUG")


def load_experiment(args) -> ExperimentConfig:
    """Конфиг из файла (или по умолчанию) с переопределениями --set, уже проверенный."""
    cfg = load_config(ExperimentConfig, args.config, args.overrides)
    cfg.validate()
    return cfg


def schema_help() -> str:
    """Все ключи конфига со значениями по умолчанию — печатается при ошибках использования."""
    lines = ["Ключи конфигурации (--set SECTION.KEY=VALUE):"]

    def walk(prefix, value):
        if isinstance(value, dict):
            for key, item in value.items():
                walk(f"{prefix}.{key}" if prefix else key, item)
        else:
            lines.append(f"  {prefix} = {value!r}")

    walk("", to_dict(ExperimentConfig()))
    return "\n".join(lines)


def resolve_checkpoint(value) -> Path:
    """
    Файл чекпоинта, каталог запуска (берётся final.pt или последний шаг)
    или слово "final" — финальный чекпоинт запуска по умолчанию в RUNS_DIR/train.
    """
    path = Path(value)
    if value == "final" and not path.exists():
        path = Path(RUNS_DIR) / "train"
    if path.is_file():
        return path
    if path.is_dir():
        for candidate in (path / "checkpoints" / FINAL_NAME, path / FINAL_NAME):
            if candidate.is_file():
                return candidate
        latest = latest_checkpoint(path / "checkpoints") or latest_checkpoint(path)
        if latest is not None:
            return latest
    raise CheckpointError("чекпоинт не найден", value)


# аргументы, которые не нужны для повтора запуска
_NOT_REPLAYED = {"handler", "command", "config", "overrides", "verbose"}


def replay_args(args) -> dict:
    """Аргументы команды для манифеста запуска (пути и числа как есть)."""
    return {key: value for key, value in vars(args).items() if key not in _NOT_REPLAYED}
