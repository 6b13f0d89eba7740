"""
losses.py — функции потерь обучения колоризации.

- local_ssim_map / ssim_pair_loss / total_ssim_loss : мультипатчевый локальный SSIM (патчи 3, 5, 7, 9)
- adversarial_losses     : GAN-потери для пар (D_c, G m->ĉ) и (D_m, G c->m̂)
- reconstruction_loss    : L1 циклической реконструкции
- segmentation_ce / segmentation_loss : кросс-энтропия сегментации через замороженный U-Net
- total_objective        : взвешенная сумма + LossBundle для лога

Все функции чистые: результат зависит только от тензоров на входе.
"""

from __future__ import annotations

# --- Стандартные библиотеки ---
import logging                          # Предупреждения о клэмпинге вероятностей
import math
from dataclasses import asdict, dataclass, field

# --- Сторонние библиотеки ---
import torch
import torch.nn.functional as F

# --- Модули проекта ---
from app.core.errors import ConfigError, ShapeError, TrainingError


ADV_EPS = 1e-7                          # клэмп оценок дискриминатора
CE_EPS  = 1e-12                         # клэмп вероятностей сегментатора
SIGMA_EPS = 1e-12                       # под корнем у σ, чтобы градиент sqrt не уходил в бесконечность

LUMA_WEIGHTS = (0.299, 0.587, 0.114)    # Rec.601


@dataclass(frozen=True)
class SSIMConstants:
    c1: float = 1e-4                    # (0.01 * L)^2
    c2: float = 9e-4                    # (0.03 * L)^2
    c3: float | None = None             # None -> c2 / 2
    patch_sizes: tuple[int, ...] = (3, 5, 7, 9)
    dynamic_range: float = 1.0

    def validate(self) -> None:
        if self.c1 <= 0 or self.c2 <= 0 or self.resolved_c3 <= 0:
            raise ConfigError("константы SSIM должны быть > 0")
        for patch in self.patch_sizes:
            check_patch(patch)

    @property
    def resolved_c3(self) -> float:
        return self.c2 / 2 if self.c3 is None else self.c3


@dataclass
class SSIMPatchStats:
    """Локальные статистики патча в каждом пикселе."""

    mu_a: torch.Tensor
    mu_b: torch.Tensor
    sigma_a: torch.Tensor
    sigma_b: torch.Tensor
    sigma_ab: torch.Tensor


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    rec: float = 1.0
    ssim: float = 1.0
    seg: float = 1.0


@dataclass
class LossBundle:
    """Скалярные значения потерь одного шага (None — слагаемое отключено)."""

    adv_g: float | None = None
    adv_d: float | None = None
    rec: float | None = None
    cyc: float | None = None
    ssim_m_chat: float | None = None
    ssim_c_mhat: float | None = None
    ssim_c_cprime: float | None = None
    ssim_total: float | None = None
    seg: float | None = None
    total: float | None = None
    weights: LossWeights = field(default_factory=LossWeights)

    def to_record(self, step: int, epoch: int) -> dict:
        """Одна строка loss_log.jsonl."""
        record = {key: value for key, value in asdict(self).items() if key != "weights"}
        return {"step": step, "epoch": epoch, **record}


# --- Локальный SSIM ---

def check_patch(patch: int) -> None:
    if patch < 1 or patch % 2 == 0:
        raise ConfigError(f"размер патча должен быть нечётным, получено {patch}")


def luminance(img: torch.Tensor) -> torch.Tensor:
    """Яркость (n, 1, h, w): 1-канальный вход возвращается как есть, 3-канальный — Rec.601."""
    if img.dim() != 4:
        raise ShapeError(f"ожидается тензор (n, ch, h, w), получено {tuple(img.shape)}")
    if img.shape[1] == 1:
        return img
    if img.shape[1] == 3:
        weights = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
        return (img * weights).sum(dim=1, keepdim=True)
    raise ShapeError(f"яркость определена для 1 или 3 каналов, получено {img.shape[1]}")


def _box_mean(x: torch.Tensor, patch: int) -> torch.Tensor:
    pad = patch // 2
    if pad:
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return F.avg_pool2d(x, patch, stride=1)


def patch_stats(a: torch.Tensor, b: torch.Tensor, patch: int) -> SSIMPatchStats:
    """Средние, σ и ковариация по окну patch x patch с центром в каждом пикселе."""
    if a.shape != b.shape:
        raise ShapeError(f"SSIM: формы не совпадают {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4:
        raise ShapeError(f"SSIM: ожидается тензор (n, ch, h, w), получено {tuple(a.shape)}")
    check_patch(patch)

    mu_a = _box_mean(a, patch)
    mu_b = _box_mean(b, patch)
    var_a = (_box_mean(a * a, patch) - mu_a * mu_a).clamp_min(0)
    var_b = (_box_mean(b * b, patch) - mu_b * mu_b).clamp_min(0)
    cov = _box_mean(a * b, patch) - mu_a * mu_b
    return SSIMPatchStats(
        mu_a=mu_a,
        mu_b=mu_b,
        sigma_a=torch.sqrt(var_a + SIGMA_EPS),
        sigma_b=torch.sqrt(var_b + SIGMA_EPS),
        sigma_ab=cov,
    )


def local_ssim_components(a, b, patch: int, k: SSIMConstants = SSIMConstants()):
    """Карты яркостного l, контрастного k и структурного t сходства."""
    stats = patch_stats(a, b, patch)
    c3 = k.resolved_c3
    lum = (2 * stats.mu_a * stats.mu_b + k.c1) / (stats.mu_a ** 2 + stats.mu_b ** 2 + k.c1)
    contrast = (2 * stats.sigma_a * stats.sigma_b + k.c2) / (stats.sigma_a ** 2 + stats.sigma_b ** 2 + k.c2)
    structure = (stats.sigma_ab + c3) / (stats.sigma_a * stats.sigma_b + c3)
    return lum, contrast, structure


def local_ssim_map(a, b, patch: int, k: SSIMConstants = SSIMConstants()) -> torch.Tensor:
    """Попиксельный SSIM = l * k * t, форма как у входа."""
    lum, contrast, structure = local_ssim_components(a, b, patch, k)
    return lum * contrast * structure


def ssim_pair_loss(a, b, k: SSIMConstants = SSIMConstants(), per_channel: bool = False) -> torch.Tensor:
    """
    Σ_b (1 - mean SSIM_b(a, b)) по размерам патчей; 0 только для одинаковых изображений.
    per_channel=False: оба входа сводятся к яркости (кросс-модальные пары).
    per_channel=True : сравнение по каналам RGB, среднее по каналам.
    """
    if not per_channel:
        a, b = luminance(a), luminance(b)
    loss = a.new_zeros(())
    for patch in k.patch_sizes:
        loss = loss + (1 - local_ssim_map(a, b, patch, k).mean())
    return loss


def total_ssim_loss(m, c, c_hat, m_hat, c_prime=None, k: SSIMConstants = SSIMConstants()):
    """
    L_ssim = L(m, ĉ) + L(c, m̂) + L(c, c′).
    Без псевдо-Cryosection третье слагаемое отсутствует (в компонентах None).
    """
    components = {
        "ssim_m_chat": ssim_pair_loss(m, c_hat, k),
        "ssim_c_mhat": ssim_pair_loss(c, m_hat, k),
        "ssim_c_cprime": None if c_prime is None else ssim_pair_loss(c, c_prime, k, per_channel=True),
    }
    total = sum(value for value in components.values() if value is not None)
    return total, components


# --- Состязательные потери ---

def _log_score(score: torch.Tensor) -> torch.Tensor:
    return torch.log(score.clamp(ADV_EPS, 1 - ADV_EPS))


def _log_one_minus(score: torch.Tensor) -> torch.Tensor:
    return torch.log(1 - score.clamp(ADV_EPS, 1 - ADV_EPS))


def discriminator_loss(discriminator, real, fakes) -> torch.Tensor:
    """-[E log D(real) + Σ E log(1 - D(fake))]; фейки отсоединены от графа генератора."""
    loss = -_log_score(discriminator(real)).mean()
    for fake in fakes:
        loss = loss - _log_one_minus(discriminator(fake.detach())).mean()
    return loss


def generator_adversarial_loss(discriminator, fakes) -> torch.Tensor:
    """Ненасыщающая форма: -Σ E log D(fake)."""
    loss = fakes[0].new_zeros(())
    for fake in fakes:
        loss = loss - _log_score(discriminator(fake)).mean()
    return loss


def adversarial_losses(real_c, fake_c, real_m, fake_m, d_c, d_m, extra_fake_c=None):
    """
    Возвращает (L_adv_d, L_adv_g) для обеих пар генератор-дискриминатор.
    extra_fake_c — псевдо-Cryosection c′, если он подаётся в D_c как дополнительный фейк.
    """
    fakes_c = [fake_c] if extra_fake_c is None else [fake_c, extra_fake_c]
    loss_d = discriminator_loss(d_c, real_c, fakes_c) + discriminator_loss(d_m, real_m, [fake_m])
    loss_g = generator_adversarial_loss(d_c, fakes_c) + generator_adversarial_loss(d_m, [fake_m])
    return loss_d, loss_g


# --- Реконструкция ---

def reconstruction_loss(m, m_rec, c, c_rec) -> torch.Tensor:
    """mean|m_rec - m| + mean|c_rec - c|."""
    if m.shape != m_rec.shape or c.shape != c_rec.shape:
        raise ShapeError(
            f"реконструкция: формы не совпадают {tuple(m.shape)}/{tuple(m_rec.shape)}, "
            f"{tuple(c.shape)}/{tuple(c_rec.shape)}"
        )
    return (m_rec - m).abs().mean() + (c_rec - c).abs().mean()


# --- Сегментация ---

def segmentation_ce(s: torch.Tensor, s_hat: torch.Tensor) -> torch.Tensor:
    """
    CE = -(1/wh) Σ_k Σ_j Σ_i s log ŝ, нормировка только на площадь (не на l).
    Для батча — среднее по элементам.
    """
    if s.shape != s_hat.shape:
        raise ShapeError(f"сегментация: формы не совпадают {tuple(s.shape)} vs {tuple(s_hat.shape)}")
    if s.dim() != 4:
        raise ShapeError(f"сегментация: ожидается тензор (n, l, h, w), получено {tuple(s.shape)}")

    clamped = ((s > 0) & (s_hat <= CE_EPS)).sum().item()
    if clamped:
        logging.warning("CE сегментации: %s вероятностей ниже %s, применён клэмп", clamped, CE_EPS)

    height, width = s.shape[-2:]
    per_item = -(s * torch.log(s_hat.clamp_min(CE_EPS))).sum(dim=(1, 2, 3)) / (height * width)
    return per_item.mean()


def segmentation_loss(s, c_prime, segmenter) -> torch.Tensor:
    """CE(s, S(c′)); параметры сегментатора заморожены, градиент идёт только в c′."""
    classes = segmenter.cfg.out_channels
    if s.shape[1] != classes:
        raise ConfigError(f"сегментатор обучен на {classes} классов, в разметке {s.shape[1]}")
    return segmentation_ce(s, segmenter(c_prime))


# --- Полная цель ---

def _scalar(value):
    return None if value is None else float(value.detach()) if torch.is_tensor(value) else float(value)


def total_objective(
    adv_g,
    rec=None,
    ssim_total=None,
    seg=None,
    weights: LossWeights = LossWeights(),
    ssim_components: dict | None = None,
    adv_d=None,
    sample_ids=None,
):
    """
    L = λ_adv·L_adv_g + λ_rec·L_rec + λ_ssim·L_ssim + λ_seg·L_seg.
    Отключённые слагаемые передаются как None. Возвращает (тензор для backward, LossBundle).
    """
    weighted = [(weights.adv, adv_g), (weights.rec, rec), (weights.ssim, ssim_total), (weights.seg, seg)]
    total = sum(weight * term for weight, term in weighted if term is not None)

    components = ssim_components or {}
    bundle = LossBundle(
        adv_g=_scalar(adv_g),
        adv_d=_scalar(adv_d),
        rec=_scalar(rec),
        cyc=_scalar(adv_g + rec if rec is not None else adv_g),
        ssim_m_chat=_scalar(components.get("ssim_m_chat")),
        ssim_c_mhat=_scalar(components.get("ssim_c_mhat")),
        ssim_c_cprime=_scalar(components.get("ssim_c_cprime")),
        ssim_total=_scalar(ssim_total),
        seg=_scalar(seg),
        total=_scalar(total),
        weights=weights,
    )

    values = {key: value for key, value in asdict(bundle).items() if key != "weights"}
    bad = [key for key, value in values.items() if value is not None and not math.isfinite(value)]
    if bad:
        logging.error("Нечисловые значения потерь %s: %s", bad, values)
        raise TrainingError(f"потери не конечны: {', '.join(bad)}", bundle=values, sample_ids=sample_ids)
    return total, bundle
