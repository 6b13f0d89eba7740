"""
metrics.py — метрики качества колоризации и отчёт по тестовой выборке.

Метрики: CF, ΔCF, SSIM, MS-SSIM, STSIM, FSIM.
Пары сравнения зафиксированы в image_metrics:
    SSIM, MS-SSIM  — яркость ĉ против входной MRI m
    CF             — ĉ
    ΔCF            — CF(c) - CF(ĉ)
    FSIM, STSIM    — яркость ĉ против яркости Cryosection c

FSIM и STSIM считаются по яркости (не FSIMc), это отмечается в метаданных отчёта.
"""

from __future__ import annotations

# --- Стандартные библиотеки ---
import logging                          # Отслеживание работы/диагностика проблем
import math
from dataclasses import dataclass, field

# --- Сторонние библиотеки ---
import numpy as np
import torch
import torch.nn.functional as F
from phasepack import phasecong         # Фазовая конгруэнтность (лог-Габор банк)
from scipy import ndimage               # Градиенты Шарра и локальные окна STSIM

# --- Модули проекта ---
from app.colorization.experiment import load_colorizer
from app.colorization.losses import LUMA_WEIGHTS, SSIMConstants, local_ssim_components
from app.colorization.phantom import load_triplet
from app.core.errors import ShapeError


METRIC_COLUMNS = ("cf", "delta_cf", "ssim", "ms_ssim", "stsim", "fsim")
METRIC_HEADERS = {
    "cf": "CF", "delta_cf": "ΔCF", "ssim": "SSIM", "ms_ssim": "MS-SSIM", "stsim": "STSIM", "fsim": "FSIM",
}

SSIM_WINDOW       = 7
MS_SSIM_WEIGHTS   = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MS_SSIM_MIN_SIDE  = 8                   # сторона на самом грубом масштабе

# --- Параметры phasecong (общие для FSIM и STSIM) ---
PC_SCALES         = 4
PC_ORIENTS        = 4
PC_MIN_WAVELENGTH = 6
PC_MULT           = 2
PC_SIGMA_ON_F     = 0.55
FSIM_T1           = 0.85
FSIM_T2           = 160.0
FSIM_MIN_SIDE     = 32
STSIM_WINDOW      = 7
STSIM_C           = 1e-4


# --- Приведение входов ---

def _as_array(img) -> np.ndarray:
    """Тензор/массив (ch, h, w), (1, ch, h, w) или (h, w) -> float64 массив (ch, h, w)."""
    if torch.is_tensor(img):
        img = img.detach().cpu().numpy()
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ShapeError(f"метрики считаются по одному изображению, получен батч {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"ожидается изображение (ch, h, w), получено {arr.shape}")
    return arr


def to_luma(img) -> np.ndarray:
    """Яркость (h, w): 1 канал как есть, 3 канала — Rec.601."""
    arr = _as_array(img)
    if arr.shape[0] == 1:
        return arr[0]
    if arr.shape[0] == 3:
        return np.tensordot(np.asarray(LUMA_WEIGHTS), arr, axes=1)
    raise ShapeError(f"яркость определена для 1 или 3 каналов, получено {arr.shape[0]}")


def _rgb(img) -> np.ndarray:
    arr = _as_array(img)
    if arr.shape[0] != 3:
        raise ShapeError(f"colorfulness требует 3 канала, получено {arr.shape[0]}")
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"формы не совпадают: {a.shape} vs {b.shape}")


# --- Цветность ---

def colorfulness(img) -> float:
    """CF по Hasler–Süsstrunk на каналах в [0, 1] (σ — популяционное)."""
    r, g, b = _rgb(img)
    rg = r - g
    yb = 0.5 * (r + g) - b
    return float(np.sqrt(rg.std() ** 2 + yb.std() ** 2) + 0.3 * np.sqrt(rg.mean() ** 2 + yb.mean() ** 2))


def delta_cf(ref_c, gen) -> float:
    """CF(эталон) - CF(сгенерированное), со знаком."""
    return colorfulness(ref_c) - colorfulness(gen)


# --- SSIM / MS-SSIM ---

def _ssim_terms(a: np.ndarray, b: np.ndarray, window: int):
    ta = torch.from_numpy(np.ascontiguousarray(a))[None, None]
    tb = torch.from_numpy(np.ascontiguousarray(b))[None, None]
    lum, contrast, structure = local_ssim_components(ta, tb, window, SSIMConstants())
    return lum, contrast * structure


def ssim_metric(a, b, window: int = SSIM_WINDOW) -> float:
    """Среднее карты локального SSIM с окном 7x7 (один масштаб), цветные входы — по яркости."""
    la, lb = to_luma(a), to_luma(b)
    _same_shape(la, lb)
    lum, cs = _ssim_terms(la, lb, window)
    return float((lum * cs).mean())


def ms_ssim_scales(height: int, width: int) -> int:
    """Число масштабов: не больше 5 и чтобы грубая сторона была >= MS_SSIM_MIN_SIDE."""
    side = min(height, width)
    if side < MS_SSIM_MIN_SIDE:
        raise ShapeError(f"MS-SSIM: минимальный размер изображения {MS_SSIM_MIN_SIDE}x{MS_SSIM_MIN_SIDE}")
    scales = 1
    while scales < len(MS_SSIM_WEIGHTS) and side // 2 ** scales >= MS_SSIM_MIN_SIDE:
        scales += 1
    return scales


def ms_ssim(a, b) -> float:
    """
    Многомасштабный SSIM: Π_j cs_j^{w_j} по масштабам, на самом грубом ещё и l^{w};
    веса стандартные, при меньшем числе масштабов перенормируются.
    """
    la, lb = to_luma(a), to_luma(b)
    _same_shape(la, lb)
    scales = ms_ssim_scales(*la.shape)
    weights = np.asarray(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()

    ta = torch.from_numpy(np.ascontiguousarray(la))[None, None]
    tb = torch.from_numpy(np.ascontiguousarray(lb))[None, None]
    score = 1.0
    for j in range(scales):
        lum, contrast, structure = local_ssim_components(ta, tb, SSIM_WINDOW, SSIMConstants())
        cs = max(float((contrast * structure).mean()), 0.0)
        if j == scales - 1:
            score *= (max(float(lum.mean()), 0.0) * cs) ** weights[j]
        else:
            score *= cs ** weights[j]
            ta, tb = F.avg_pool2d(ta, 2), F.avg_pool2d(tb, 2)
    return float(np.clip(score, 0.0, 1.0))


# --- Фазовая конгруэнтность (phasepack) ---

def phase_features(img: np.ndarray):
    """
    Фазовая конгруэнтность и отклики лог-Габор банка одного изображения.
    Возвращает (pc, bands): pc — сумма PC по ориентациям (h, w),
    bands — модули комплексных откликов всех подполос.
    """
    result = phasecong(
        img, nscale=PC_SCALES, norient=PC_ORIENTS, minWaveLength=PC_MIN_WAVELENGTH,
        mult=PC_MULT, sigmaOnf=PC_SIGMA_ON_F,
    )
    pc_list, eo = result[4], result[5]
    pc = np.sum([np.asarray(p, dtype=np.float64) for p in pc_list], axis=0)
    # eo: вложенная последовательность (масштаб/ориентация) комплексных откликов
    bands = [np.abs(np.asarray(response)) for group in eo for response in group]
    return pc, bands


def _check_min_side(img: np.ndarray, name: str) -> None:
    if min(img.shape) < FSIM_MIN_SIDE:
        raise ShapeError(f"{name}: минимальный размер изображения {FSIM_MIN_SIDE}x{FSIM_MIN_SIDE}, получено {img.shape}")


# --- FSIM ---

def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Модуль градиента по ядрам Шарра."""
    kernel = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]], dtype=np.float64) / 16
    gx = ndimage.convolve(img, kernel, mode="reflect")
    gy = ndimage.convolve(img, kernel.T, mode="reflect")
    return np.sqrt(gx ** 2 + gy ** 2)


def fsim(a, b) -> float:
    """FSIM по яркости; пороги T1, T2 заданы для шкалы 0..255."""
    la, lb = to_luma(a) * 255.0, to_luma(b) * 255.0
    _same_shape(la, lb)
    _check_min_side(la, "FSIM")

    (pc_a, _), (pc_b, _) = phase_features(la), phase_features(lb)
    g_a, g_b = gradient_magnitude(la), gradient_magnitude(lb)
    s_pc = (2 * pc_a * pc_b + FSIM_T1) / (pc_a ** 2 + pc_b ** 2 + FSIM_T1)
    s_g = (2 * g_a * g_b + FSIM_T2) / (g_a ** 2 + g_b ** 2 + FSIM_T2)
    pc_max = np.maximum(pc_a, pc_b)
    if pc_max.sum() <= 0:
        # нет структуры ни в одном изображении
        return float(s_g.mean())
    return float(np.clip((s_pc * s_g * pc_max).sum() / pc_max.sum(), 0.0, 1.0))


# --- STSIM ---

def _subband_score(x: np.ndarray, y: np.ndarray) -> float:
    """Сходство одной пары подполос: среднее, дисперсия, автокорреляции лага 1."""
    def local(z):
        return ndimage.uniform_filter(z, STSIM_WINDOW, mode="reflect")

    def shifted(z, axis):
        # сдвиг на 1 пиксель с повтором края
        tail = z[:, -1:] if axis == 1 else z[-1:, :]
        return np.concatenate([z[:, 1:], tail] if axis == 1 else [z[1:, :], tail], axis=axis)

    def autocorr(z, mu, sigma, axis):
        zs = shifted(z, axis)
        mu_s = local(zs)
        sigma_s = np.sqrt(np.maximum(local(zs * zs) - mu_s ** 2, 0.0))
        cov = local(z * zs) - mu * mu_s
        return np.clip(cov / (sigma * sigma_s + STSIM_C), -1.0, 1.0)

    mu_x, mu_y = local(x), local(y)
    sigma_x = np.sqrt(np.maximum(local(x * x) - mu_x ** 2, 0.0))
    sigma_y = np.sqrt(np.maximum(local(y * y) - mu_y ** 2, 0.0))

    lum = (2 * mu_x * mu_y + STSIM_C) / (mu_x ** 2 + mu_y ** 2 + STSIM_C)
    contrast = (2 * sigma_x * sigma_y + STSIM_C) / (sigma_x ** 2 + sigma_y ** 2 + STSIM_C)
    c01 = 1 - 0.5 * np.abs(autocorr(x, mu_x, sigma_x, 1) - autocorr(y, mu_y, sigma_y, 1))
    c10 = 1 - 0.5 * np.abs(autocorr(x, mu_x, sigma_x, 0) - autocorr(y, mu_y, sigma_y, 0))

    terms = np.clip(lum * contrast * c01 * c10, 0.0, 1.0)
    return float((terms ** 0.25).mean())


def stsim(a, b) -> float:
    """STSIM-1 на модулях подполос лог-Габор банка phasecong, геометрическое среднее по подполосам."""
    la, lb = to_luma(a), to_luma(b)
    _same_shape(la, lb)
    _check_min_side(la, "STSIM")

    _, bands_a = phase_features(la)
    _, bands_b = phase_features(lb)
    scores = [_subband_score(x, y) for x, y in zip(bands_a, bands_b)]
    return float(np.exp(np.mean(np.log(np.maximum(scores, 1e-12)))))


# --- Отчёт ---

def image_metrics(m, c, c_hat) -> dict:
    """Все шесть метрик одного изображения по зафиксированным парам сравнения."""
    luma_hat = to_luma(c_hat)
    luma_m = to_luma(m)
    luma_c = to_luma(c)
    return {
        "cf":       colorfulness(c_hat),
        "delta_cf": delta_cf(c, c_hat),
        "ssim":     ssim_metric(luma_hat, luma_m),
        "ms_ssim":  ms_ssim(luma_hat, luma_m),
        "stsim":    stsim(luma_hat, luma_c),
        "fsim":     fsim(luma_hat, luma_c),
    }


def aggregate(per_image: list[dict]) -> dict:
    """mean и std (ddof=0) по каждой метрике, None-значения пропускаются."""
    result = {}
    for name in METRIC_COLUMNS:
        values = [row[name] for row in per_image if row.get(name) is not None]
        result[name] = {
            "mean": float(np.mean(values)) if values else None,
            "std": float(np.std(values)) if values else None,
            "count": len(values),
        }
    return result


@dataclass
class MetricReport:
    per_image: list[dict]
    aggregate: dict
    metadata: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)     # {"index", "metric"} для NaN

    def to_document(self) -> dict:
        return {
            "metadata": self.metadata,
            "per_image": self.per_image,
            "aggregate": self.aggregate,
            "failures": self.failures,
        }


def evaluate_model(manifest, colorize, split: str = "test", metadata: dict | None = None) -> MetricReport:
    """
    Прогоняет colorize(m) -> ĉ по всей выборке и считает метрики.
    colorize получает только MRI (1, 1, h, w); Cryosection используется лишь как эталон.
    """
    size = manifest.split_size(split)
    if size == 0:
        raise ShapeError(f"выборка '{split}' пуста")

    per_image, failures = [], []
    for i in range(size):
        sample = load_triplet(manifest, split, i)
        m = torch.from_numpy(sample.m)[None]
        with torch.no_grad():
            c_hat = colorize(m)
        row = image_metrics(sample.m, sample.c, c_hat)
        for name, value in row.items():
            if not math.isfinite(value):
                failures.append({"index": i, "metric": name})
                row[name] = None
        per_image.append({"index": i, **row})

    if failures:
        logging.warning("Нечисловые метрики: %s (исключены из агрегата)", len(failures))
    report = MetricReport(
        per_image=per_image,
        aggregate=aggregate(per_image),
        metadata={
            "split": split,
            "dataset_checksum": manifest.checksum,
            "n_images": size,
            "nan_count": len(failures),
            "fsim_stsim_variant": "luminance",
            **(metadata or {}),
        },
        failures=failures,
    )
    logging.info("Оценка завершена: %s изображений, SSIM %s", size, report.aggregate["ssim"]["mean"])
    return report


def evaluate(manifest, checkpoint, split: str = "test", device: str = "cpu") -> MetricReport:
    """Оценка генератора из чекпоинта (отказ при несовпадении отпечатка архитектуры)."""
    generator, fingerprint = load_colorizer(checkpoint, device=device)

    def colorize(m):
        c_hat, _ = generator(m.to(device))
        return c_hat.cpu()

    return evaluate_model(
        manifest, colorize, split, metadata={"checkpoint": str(checkpoint), "fingerprint": fingerprint}
    )
