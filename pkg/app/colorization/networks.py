"""
networks.py — нейросети колоризации.

- SEBlock            : блок сжатия-активации (squeeze-excitation) на skip-связях
- MultiscaleFusion   : три свёрточных пути по m, m/2, m/4, слияние "сумма + конкатенация"
- ColorizationGenerator (G m->ĉ): общий энкодер и два декодера (ĉ и псевдо-Cryosection c′)
- ReverseGenerator      (G c->m̂): тот же энкодер-декодер с одним декодером
- Discriminator      : 5 свёрток + LeakyReLU, затем Linear(1) + Sigmoid по всему изображению
- UNet               : сегментатор Cryosection, на выходе softmax по l классам

Батчи изображений — тензоры (n, ch, h, w); модальность проверяется на входе сетей.
"""

from __future__ import annotations

# --- Стандартные библиотеки ---
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Literal

# --- Сторонние библиотеки ---
import torch
import torch.nn as nn
import torch.nn.functional as F

# --- Модули проекта ---
from app.colorization.phantom import downsample
from app.core.errors import ConfigError, ShapeError


class Modality(str, Enum):
    MRI     = "mri"
    CRYO    = "cryo"
    SEG     = "seg"
    FEATURE = "feature"


_MODALITY_CHANNELS = {Modality.MRI: 1, Modality.CRYO: 3}


def check_modality(x: torch.Tensor, modality: Modality, channels: int | None = None, name: str = "вход"):
    """Проверяет форму (n, ch, h, w) и число каналов модальности, иначе ShapeError."""
    if x.dim() != 4:
        raise ShapeError(f"{name}: ожидается тензор (n, ch, h, w), получено {tuple(x.shape)}")
    expected = _MODALITY_CHANNELS.get(modality, channels)
    if expected is not None and x.shape[1] != expected:
        raise ShapeError(f"{name}: для {modality.value} нужно {expected} каналов, получено {x.shape[1]}")


# --- Конфигурации ---

@dataclass(frozen=True)
class SEBlockConfig:
    channels: int
    reduction_ratio: int = 8

    def validate(self) -> None:
        if self.reduction_ratio <= 0 or self.channels % self.reduction_ratio:
            raise ConfigError(
                f"число каналов {self.channels} должно делиться на reduction_ratio {self.reduction_ratio}"
            )


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 64
    depth: int = 3                              # число понижений разрешения после входного блока
    num_residual_blocks: int = 4
    use_multiscale: bool = True
    use_dual_decoder: bool = True
    use_se_skips: bool = True
    inter_decoder_skips: bool = True
    inter_decoder_direction: Literal["pseudo_to_color", "color_to_pseudo"] = "pseudo_to_color"
    se_reduction: int = 8
    max_channels_factor: int = 8                # потолок ширины: base_channels * factor
    normalization: Literal["instance"] = "instance"

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError(f"depth должен быть >= 2, получено {self.depth}")
        if self.base_channels <= 0 or self.num_residual_blocks < 0:
            raise ConfigError("base_channels > 0 и num_residual_blocks >= 0")
        if self.inter_decoder_skips and not self.use_dual_decoder:
            raise ConfigError("inter_decoder_skips требует use_dual_decoder")
        for channels in self.level_channels():
            SEBlockConfig(channels, self.se_reduction).validate()

    @property
    def stem_channels(self) -> int:
        return 2 * self.base_channels if self.use_multiscale else self.base_channels

    @property
    def total_stride(self) -> int:
        return (4 if self.use_multiscale else 1) * 2 ** self.depth

    def level_channels(self) -> list[int]:
        """Ширина признаков на уровнях 0..depth (0 — выход входного блока, depth — bottleneck)."""
        ceiling = self.base_channels * self.max_channels_factor
        return [min(self.stem_channels * 2 ** j, ceiling) for j in range(self.depth + 1)]


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 3
    image_size: int = 256
    base_channels: int = 64
    num_conv_layers: int = 5
    leaky_slope: float = 0.2

    def validate(self) -> None:
        if self.num_conv_layers != 5:
            raise ConfigError(f"дискриминатор строго из 5 свёрток, получено {self.num_conv_layers}")
        if self.image_size % 2 ** self.num_conv_layers:
            raise ConfigError(f"image_size {self.image_size} должен делиться на 32")


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 3
    out_channels: int = 8                       # = l датасета
    depth: int = 4
    base_channels: int = 32

    def validate(self) -> None:
        if self.depth < 1 or self.base_channels <= 0 or self.out_channels < 1:
            raise ConfigError(f"некорректная конфигурация U-Net: {self}")


@dataclass
class BottleneckFeature:
    """Выход энкодера: bottleneck x и skip-признаки по уровням (от крупного к мелкому)."""

    data: torch.Tensor
    source_skips: list[torch.Tensor] = field(default_factory=list)


# --- Строительные блоки ---

def init_weights(module: nn.Module) -> None:
    """Усечённое нормальное распределение (std 0.02), нулевые смещения."""
    for layer in module.modules():
        if isinstance(layer, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.trunc_normal_(layer.weight, mean=0.0, std=0.02, a=-0.04, b=0.04)
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)


def conv_norm_act(in_channels: int, out_channels: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, padding_mode="reflect"),
        nn.InstanceNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


def up_norm_act(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_channels, out_channels, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class SEBlock(nn.Module):
    """
    Сжатие-активация: глобальное среднее по пространству -> Linear(ch, ch/r) -> ReLU
    -> Linear(ch/r, ch) -> Sigmoid; вход масштабируется поканально на g ∈ (0, 1).
    """

    def __init__(self, cfg: SEBlockConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        reduced = cfg.channels // cfg.reduction_ratio
        self.compress = nn.Linear(cfg.channels, reduced)
        self.activate = nn.Linear(reduced, cfg.channels)

    def gate(self, f: torch.Tensor) -> torch.Tensor:
        """Поканальные веса g формы (n, ch)."""
        if f.dim() != 4 or f.shape[1] != self.cfg.channels:
            raise ShapeError(f"SE-блок ждёт {self.cfg.channels} каналов, получено {tuple(f.shape)}")
        descriptor = f.mean(dim=(2, 3))
        return torch.sigmoid(self.activate(F.relu(self.compress(descriptor))))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return f * self.gate(f)[:, :, None, None]


class ResidualBlock(nn.Module):
    """Обычный свёрточный residual-блок; заменяет SE на skip-связях в абляции A5."""

    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


def skip_block(channels: int, cfg: GeneratorConfig) -> nn.Module:
    if cfg.use_se_skips:
        return SEBlock(SEBlockConfig(channels, cfg.se_reduction))
    return ResidualBlock(channels)


class MultiscaleFusion(nn.Module):
    """
    Три подмодуля приводят m, m/2, m/4 к разрешению (h/4, w/4) и k каналам:
    m — две свёртки со stride 2, m/2 — одна со stride 2, m/4 — одна со stride 1.
    Выход: concat(f_m, f_m2 + f_m4), 2k каналов.
    """

    def __init__(self, in_channels: int, k: int):
        super().__init__()
        self.k = k
        self.full = nn.Sequential(
            nn.Conv2d(in_channels, k, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.ReLU(inplace=True),
            nn.Conv2d(k, k, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.ReLU(inplace=True),
        )
        self.half = nn.Sequential(
            nn.Conv2d(in_channels, k, 3, stride=2, padding=1, padding_mode="reflect"),
            nn.ReLU(inplace=True),
        )
        self.quarter = nn.Sequential(
            nn.Conv2d(in_channels, k, 3, stride=1, padding=1, padding_mode="reflect"),
            nn.ReLU(inplace=True),
        )

    @property
    def half(self) -> nn.Module:  # type: ignore[override]
        # Подмодуль "half" иначе заслоняется методом nn.Module.half().
        return self._modules["half"]

    def forward(self, m: torch.Tensor) -> torch.Tensor:
        height, width = m.shape[-2:]
        if height % 4 or width % 4:
            raise ShapeError(f"мультимасштабный модуль: {height}x{width} не делится на 4")
        m2 = downsample(m, 2)
        m4 = downsample(m, 4)
        return torch.cat([self.full(m), self.half(m2) + self.quarter(m4)], dim=1)


class Encoder(nn.Module):
    """Входной блок (мультимасштабный или 7x7), depth понижений со skip-признаками, residual-блоки."""

    def __init__(self, in_channels: int, cfg: GeneratorConfig):
        super().__init__()
        channels = cfg.level_channels()
        if cfg.use_multiscale:
            self.stem = MultiscaleFusion(in_channels, cfg.base_channels)
        else:
            self.stem = nn.Sequential(
                nn.ReflectionPad2d(3),
                nn.Conv2d(in_channels, cfg.base_channels, 7),
                nn.InstanceNorm2d(cfg.base_channels),
                nn.ReLU(inplace=True),
            )
        self.downs = nn.ModuleList(
            conv_norm_act(channels[j], channels[j + 1], stride=2) for j in range(cfg.depth)
        )
        self.residual = nn.Sequential(
            *[ResidualBlock(channels[-1]) for _ in range(cfg.num_residual_blocks)]
        )

    def forward(self, x: torch.Tensor) -> BottleneckFeature:
        h = self.stem(x)
        skips = []
        for down in self.downs:
            skips.append(h)
            h = down(h)
        return BottleneckFeature(self.residual(h), skips)


class Decoder(nn.Module):
    """
    Транспонированные свёртки обратно к разрешению входного блока. На каждом уровне
    к признаку приклеиваются skip энкодера (через SE) и, если задано, признак
    соседнего декодера того же уровня (тоже через SE).
    """

    def __init__(self, cfg: GeneratorConfig, out_channels: int, receives_inter: bool = False):
        super().__init__()
        channels = cfg.level_channels()
        parts = 3 if receives_inter else 2
        self.ups = nn.ModuleList(up_norm_act(channels[j + 1], channels[j]) for j in range(cfg.depth))
        self.skip_gates = nn.ModuleList(skip_block(channels[j], cfg) for j in range(cfg.depth))
        self.inter_gates = (
            nn.ModuleList(skip_block(channels[j], cfg) for j in range(cfg.depth)) if receives_inter else None
        )
        self.merges = nn.ModuleList(conv_norm_act(parts * channels[j], channels[j]) for j in range(cfg.depth))

        if cfg.use_multiscale:
            # входной блок уменьшил разрешение в 4 раза, возвращаем двумя апсемплингами
            self.head = nn.Sequential(
                up_norm_act(channels[0], cfg.base_channels),
                up_norm_act(cfg.base_channels, cfg.base_channels),
            )
        else:
            self.head = nn.Identity()
        self.output = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(cfg.base_channels, out_channels, 7),
            nn.Sigmoid(),
        )

    def forward(self, feature: BottleneckFeature, inter: dict | None = None):
        if (self.inter_gates is None) != (inter is None):
            raise ConfigError("признаки соседнего декодера переданы не тому декодеру")
        h = feature.data
        levels = {}
        for j in reversed(range(len(self.ups))):
            h = self.ups[j](h)
            parts = [h, self.skip_gates[j](feature.source_skips[j])]
            if self.inter_gates is not None:
                parts.append(self.inter_gates[j](inter[j]))
            h = self.merges[j](torch.cat(parts, dim=1))
            levels[j] = h
        return self.output(self.head(h)), levels


class Generator(nn.Module):
    """
    Энкодер-декодер с одним или двумя декодерами.
    forward -> (основной выход, вспомогательный выход или None), размер как у входа.
    """

    def __init__(self, cfg: GeneratorConfig, in_channels: int, out_channels: int, in_modality: Modality):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.in_modality = in_modality

        inter     = cfg.use_dual_decoder and cfg.inter_decoder_skips
        to_color  = inter and cfg.inter_decoder_direction == "pseudo_to_color"
        to_pseudo = inter and cfg.inter_decoder_direction == "color_to_pseudo"

        self.encoder = Encoder(in_channels, cfg)
        self.color_decoder = Decoder(cfg, out_channels, receives_inter=to_color)
        self.pseudo_decoder = (
            Decoder(cfg, out_channels, receives_inter=to_pseudo) if cfg.use_dual_decoder else None
        )
        init_weights(self)

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        """
        Дополняет вход до кратного полному шагу энкодера (обрезается после декодера).
        Bottleneck не меньше 2x2: InstanceNorm и reflect-паддинг не работают на 1x1.
        """
        height, width = x.shape[-2:]
        if height % 4 or width % 4:
            raise ShapeError(f"сторона входа должна делиться на 4, получено {height}x{width}")
        if min(height, width) < 16:
            raise ShapeError(f"сторона входа должна быть >= 16, получено {height}x{width}")
        stride = self.cfg.total_stride
        target_h = max(-(-height // stride) * stride, 2 * stride)
        target_w = max(-(-width // stride) * stride, 2 * stride)
        pad_h, pad_w = target_h - height, target_w - width
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        return x

    def forward(self, x: torch.Tensor):
        check_modality(x, self.in_modality)
        height, width = x.shape[-2:]
        feature = self.encoder(self._pad(x))

        if self.pseudo_decoder is None:
            primary, _ = self.color_decoder(feature)
            auxiliary = None
        elif self.pseudo_decoder.inter_gates is None and self.color_decoder.inter_gates is not None:
            auxiliary, levels = self.pseudo_decoder(feature)
            primary, _ = self.color_decoder(feature, levels)
        elif self.pseudo_decoder.inter_gates is not None:
            primary, levels = self.color_decoder(feature)
            auxiliary, _ = self.pseudo_decoder(feature, levels)
        else:
            primary, _ = self.color_decoder(feature)
            auxiliary, _ = self.pseudo_decoder(feature)

        primary = primary[..., :height, :width]
        if auxiliary is not None:
            auxiliary = auxiliary[..., :height, :width]
        return primary, auxiliary


class ColorizationGenerator(Generator):
    """G m->ĉ: MRI (1 канал) -> (колоризованная MRI ĉ, псевдо-Cryosection c′ или None)."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__(cfg, in_channels=1, out_channels=3, in_modality=Modality.MRI)


class ReverseGenerator(Generator):
    """G c->m̂: Cryosection (3 канала) -> MRI-подобное изображение (1 канал), один декодер."""

    def __init__(self, cfg: GeneratorConfig):
        single = replace(cfg, use_dual_decoder=False, inter_decoder_skips=False)
        super().__init__(single, in_channels=3, out_channels=1, in_modality=Modality.CRYO)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        primary, _ = super().forward(x)
        return primary


class Discriminator(nn.Module):
    """Пять свёрток 4x4/stride 2 с LeakyReLU, затем flatten -> Linear(1) -> Sigmoid."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        base = cfg.base_channels
        widths = [cfg.in_channels, base, 2 * base, 4 * base, 8 * base, 8 * base]
        layers = []
        for i in range(cfg.num_conv_layers):
            layers += [
                nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1),
                nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            ]
        self.features = nn.Sequential(*layers)
        side = cfg.image_size // 2 ** cfg.num_conv_layers
        self.classifier = nn.Sequential(nn.Flatten(), nn.Linear(widths[-1] * side * side, 1), nn.Sigmoid())
        init_weights(self)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        """Оценки (n,) строго в (0, 1)."""
        if img.dim() != 4 or img.shape[1] != self.cfg.in_channels:
            raise ShapeError(
                f"дискриминатор ждёт {self.cfg.in_channels} каналов, получено {tuple(img.shape)}"
            )
        if img.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise ShapeError(
                f"дискриминатор обучен на {self.cfg.image_size}x{self.cfg.image_size}, получено {tuple(img.shape[-2:])}"
            )
        return self.classifier(self.features(img)).squeeze(1)


def double_conv(in_channels: int, out_channels: int) -> nn.Sequential:
    """Conv-BN-ReLU x2, классический блок U-Net."""
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Сегментатор Cryosection: 3 канала -> вероятности l классов (softmax по каналам)."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.downs = nn.ModuleList(
            double_conv(cfg.in_channels if i == 0 else widths[i - 1], widths[i]) for i in range(cfg.depth)
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = double_conv(widths[cfg.depth - 1], widths[cfg.depth])
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in range(cfg.depth)
        )
        self.merges = nn.ModuleList(double_conv(2 * widths[i], widths[i]) for i in range(cfg.depth))
        self.out = nn.Conv2d(widths[0], cfg.out_channels, 1)
        init_weights(self)

    def logits(self, c: torch.Tensor) -> torch.Tensor:
        check_modality(c, Modality.CRYO, name="сегментатор")
        height, width = c.shape[-2:]
        if height % 2 ** self.cfg.depth or width % 2 ** self.cfg.depth:
            raise ShapeError(f"U-Net: {height}x{width} не делится на {2 ** self.cfg.depth}")
        skips = []
        h = c
        for down in self.downs:
            h = down(h)
            skips.append(h)
            h = self.pool(h)
        h = self.bottleneck(h)
        for i in reversed(range(self.cfg.depth)):
            h = self.merges[i](torch.cat([self.ups[i](h), skips[i]], dim=1))
        return self.out(h)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(c), dim=1)


def count_modules(model: nn.Module, kind: type) -> int:
    """Сколько подмодулей данного типа в дереве модели."""
    return sum(1 for module in model.modules() if isinstance(module, kind))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
