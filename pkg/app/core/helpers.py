"""
Вспомогательные функции для JSON-документов на диске:
манифесты, отчёты, resolved-конфиги и построчные логи лоссов.

Все записи атомарные: сначала временный файл рядом, затем os.replace.
"""

# --- Стандартные библиотеки ---
import hashlib                          # Контрольные суммы датасета
import json                             # Сериализация
import logging                          # Отслеживание работы/диагностика проблем
import os
import tempfile
from pathlib import Path


def read_json(path):
    """
    Читает JSON-документ.
    Возвращает Python-объект или None, если файла нет.
    """
    path = Path(path)
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    logging.debug("Прочитан JSON: %s", path)
    return data


def atomic_write(path, write_fn, mode="w"):
    """
    Атомарная запись: write_fn(file) пишет во временный файл,
    который затем переименовывается в path (частично записанных файлов не бывает).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        encoding = None if "b" in mode else "utf-8"
        with os.fdopen(fd, mode, encoding=encoding) as f:
            write_fn(f)
        os.replace(tmp_name, path)
    except OSError as e:
        logging.error("Ошибка записи %s: %s", path, e)
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def write_json(path, value):
    """
    Сохраняет value в JSON (отсортированные ключи, чтобы байты были воспроизводимы).
    path  : куда писать
    value : данные (будут сериализованы в JSON)
    """
    atomic_write(path, lambda f: json.dump(value, f, ensure_ascii=False, indent=2, sort_keys=True))
    logging.info("JSON записан: %s", path)


def append_jsonl(path, record):
    """Дописывает одну запись в построчный JSON-лог."""
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def write_jsonl(path, records):
    """Перезаписывает построчный JSON-лог целиком (используется при резюме обучения)."""
    def _write(f):
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    atomic_write(path, _write)


def read_jsonl(path):
    """Читает построчный JSON-лог в список словарей."""
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def sha256_files(paths):
    """Контрольная сумма набора файлов (в заданном порядке, вместе с именами)."""
    digest = hashlib.sha256()
    for path in paths:
        path = Path(path)
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def sha256_json(value):
    """Контрольная сумма канонического JSON (отпечатки конфигов)."""
    canonical = json.dumps(value, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
