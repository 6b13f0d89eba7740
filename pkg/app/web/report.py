"""
report.py — артефакты для просмотра результатов офлайн.

Содержит:
- emit_comparison_grid — сетка изображений: строки "GT Cryo." / "Input MRI" / "Output", столбец на образец
- render_metric_table  — таблица фиксированной ширины (CF, ΔCF, SSIM, MS-SSIM, STSIM, FSIM)
- render_html_report   — HTML-отчёт с таблицей и сеткой
Текстовые форматы рендерятся Jinja2-шаблонами из TEMPLATES_DIR.
"""

# --- Стандартные библиотеки ---
import logging                                   # Отслеживание работы/диагностика проблем
from pathlib import Path

# --- Сторонние библиотеки ---
import numpy as np
from jinja2 import Environment, FileSystemLoader, select_autoescape  # Рендер таблиц и HTML-отчёта
from PIL import Image, ImageDraw, ImageFont      # Сборка сетки сравнения

# --- Модули проекта ---
from app.colorization.metrics import METRIC_COLUMNS, METRIC_HEADERS
from app.core.config import TEMPLATES_DIR
from app.core.errors import ShapeError
from app.core.helpers import atomic_write

# шаблоны отчётов (через Jinja2)
templates = Environment(
    loader=FileSystemLoader(TEMPLATES_DIR),
    autoescape=select_autoescape(["html"]),
    trim_blocks=True,
    lstrip_blocks=True,
)

GRID_ROWS    = ("GT Cryo.", "Input MRI", "Output")
LABEL_WIDTH  = 80                                # поле подписей строк слева
GRID_PADDING = 4


def _to_rgb_uint8(image) -> np.ndarray:
    """(1|3, h, w) в [0, 1] -> (h, w, 3) uint8."""
    arr = np.asarray(image.detach().cpu() if hasattr(image, "detach") else image, dtype=np.float64)
    if arr.ndim == 4:
        arr = arr[0]
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    return np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)


def grid_size(n_samples: int, tile: int) -> tuple[int, int]:
    """(ширина, высота) сетки в пикселях."""
    step = tile + GRID_PADDING
    return LABEL_WIDTH + n_samples * step + GRID_PADDING, len(GRID_ROWS) * step + GRID_PADDING


def emit_comparison_grid(samples, outputs, path) -> Path:
    """
    samples — тройки (TripletSample), outputs — колоризованные ĉ (3, h, w) той же длины.
    Пустой список или разная длина — ShapeError, файл не создаётся.
    """
    if len(samples) == 0 or len(samples) != len(outputs):
        raise ShapeError(f"сетка: нужно одинаковое ненулевое число образцов и выходов ({len(samples)}/{len(outputs)})")

    tile = samples[0].c.shape[-1]
    width, height = grid_size(len(samples), tile)
    canvas = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()

    step = tile + GRID_PADDING
    for row, label in enumerate(GRID_ROWS):
        draw.text((GRID_PADDING, GRID_PADDING + row * step + tile // 2), label, fill=(0, 0, 0), font=font)
    for column, (sample, output) in enumerate(zip(samples, outputs)):
        for row, image in enumerate((sample.c, sample.m, output)):
            tile_image = Image.fromarray(_to_rgb_uint8(image))
            if tile_image.size != (tile, tile):
                tile_image = tile_image.resize((tile, tile), Image.Resampling.NEAREST)
            canvas.paste(tile_image, (LABEL_WIDTH + column * step, GRID_PADDING + row * step))

    path = Path(path)
    atomic_write(path, lambda f: canvas.save(f, format="PNG"), mode="wb")
    logging.info("Сетка сравнения записана: %s (%s образцов)", path, len(samples))
    return path


def _format_cell(stats) -> str:
    if stats is None or stats.get("mean") is None:
        return "n/a"
    return f"{stats['mean']:.3f} ± {stats['std']:.3f}"


def table_rows(aggregates: dict) -> list[dict]:
    """Подпись строки -> агрегат: в строки таблицы с отформатированными ячейками."""
    rows = []
    for label, aggregate in aggregates.items():
        cells = [_format_cell(aggregate.get(name) if aggregate else None) for name in METRIC_COLUMNS]
        rows.append({"label": label, "cells": cells, "failed": aggregate is None})
    return rows


def render_metric_table(aggregates: dict) -> str:
    headers = [METRIC_HEADERS[name] for name in METRIC_COLUMNS]
    return templates.get_template("metrics_table.txt.j2").render(headers=headers, rows=table_rows(aggregates))


def render_html_report(title: str, aggregates: dict, metadata: dict, grid_name: str | None = None, errors=None) -> str:
    headers = [METRIC_HEADERS[name] for name in METRIC_COLUMNS]
    return templates.get_template("report.html.j2").render(
        title=title,
        headers=headers,
        rows=table_rows(aggregates),
        metadata=metadata,
        grid_name=grid_name,
        errors=errors or {},
    )


def write_text(path, text: str) -> Path:
    path = Path(path)
    atomic_write(path, lambda f: f.write(text))
    logging.info("Отчёт записан: %s", path)
    return path
