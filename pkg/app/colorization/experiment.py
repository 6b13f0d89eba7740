"""
experiment.py — полная конфигурация эксперимента и сборка моделей по ней.

ExperimentConfig — корень JSON-конфига (секции phantom, dataset, generator,
discriminator, segmenter, train, ssim). Флаги абляции A1..A5 живут в train.ablation
и применяются к конфигу генератора при сборке (resolved_generator).
"""

from __future__ import annotations

# --- Стандартные библиотеки ---
import dataclasses
import logging                          # Отслеживание работы/диагностика проблем
from dataclasses import dataclass, field

# --- Сторонние библиотеки ---
import torch
import torch.nn as nn

# --- Модули проекта ---
from app.colorization.losses import LossWeights, SSIMConstants
from app.colorization.networks import (
    ColorizationGenerator,
    Discriminator,
    DiscriminatorConfig,
    GeneratorConfig,
    ReverseGenerator,
    UNet,
    UNetConfig,
)
from app.colorization.phantom import PhantomSpec
from app.core.checkpoints import load_checkpoint
from app.core.config import DEVICE, from_dict, to_dict
from app.core.errors import CheckpointError, ConfigError
from app.core.helpers import sha256_json


# имя абляции -> флаг AblationFlags ("full": без флагов)
ABLATIONS = {
    "full": None,
    "A1": "disable_cycle_rec",
    "A2": "disable_seg_loss",
    "A3": "disable_seg_and_pseudo",
    "A4": "seg_on_reconstructed_cryo",
    "A5": "disable_se_blocks",
}


@dataclass(frozen=True)
class AblationFlags:
    disable_cycle_rec: bool = False             # A1: -cycle
    disable_seg_loss: bool = False              # A2: -seg
    disable_seg_and_pseudo: bool = False        # A3: -seg, -pseudo cryo
    seg_on_reconstructed_cryo: bool = False     # A4: +seg on rec. cryo
    disable_se_blocks: bool = False             # A5: -compression-activation

    def validate(self) -> None:
        active = [name for name, value in dataclasses.asdict(self).items() if value]
        if len(active) > 1:
            raise ConfigError(f"одновременно включено несколько абляций: {', '.join(active)}")

    @classmethod
    def from_name(cls, name: str) -> "AblationFlags":
        if name not in ABLATIONS:
            raise ConfigError(f"неизвестная абляция {name!r}, допустимые: {', '.join(ABLATIONS)}")
        flag = ABLATIONS[name]
        return cls() if flag is None else cls(**{flag: True})

    @property
    def name(self) -> str:
        for name, flag in ABLATIONS.items():
            if flag is not None and getattr(self, flag):
                return name
        return "full"

    @property
    def uses_segmenter(self) -> bool:
        return not (self.disable_seg_loss or self.disable_seg_and_pseudo)

    @property
    def uses_pseudo_decoder(self) -> bool:
        return not (self.disable_seg_and_pseudo or self.seg_on_reconstructed_cryo)


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 200
    n_test: int = 40
    workers: int = 1

    def validate(self) -> None:
        if self.n_train <= 0 or self.n_test <= 0 or self.workers < 1:
            raise ConfigError(f"некорректные размеры датасета: {self}")


@dataclass(frozen=True)
class TrainConfig:
    lr_generators: float = 1e-3
    lr_discriminators: float = 1e-4
    lr_segmenter_pretrain: float = 1e-6
    betas: tuple[float, float] = (0.5, 0.999)
    epochs: int = 150
    batch_size: int = 28
    image_size: int | None = None               # None -> берётся из манифеста датасета
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    checkpoint_every: int = 500
    device: str = DEVICE
    freeze_segmenter: bool = True
    seg_on_literal_cryo: bool = False           # CE(s, S(c)) вместо CE(s, S(c′))
    pseudo_as_fake: bool = False                # c′ как дополнительный фейк для D_c
    seg_epochs: int = 200
    seg_batch_size: int = 8
    seg_target_accuracy: float = 0.9
    seg_max_pairs: int | None = None            # 46 пар, как в эксперименте с реальными срезами
    num_workers: int = 0
    log_every: int = 10

    def validate(self) -> None:
        if min(self.lr_generators, self.lr_discriminators, self.lr_segmenter_pretrain) <= 0:
            raise ConfigError("все learning rate должны быть > 0")
        if self.batch_size < 1 or self.seg_batch_size < 1:
            raise ConfigError("batch_size должен быть >= 1")
        if self.epochs < 1 or self.seg_epochs < 1:
            raise ConfigError("число эпох должно быть >= 1")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every и log_every должны быть >= 1")
        if self.seg_max_pairs is not None and self.seg_max_pairs < 1:
            raise ConfigError("seg_max_pairs должен быть >= 1")
        self.ablation.validate()


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    segmenter: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssim: SSIMConstants = field(default_factory=SSIMConstants)

    def validate(self) -> None:
        self.phantom.validate()
        self.dataset.validate()
        self.train.validate()
        self.ssim.validate()
        self.resolved_generator().validate()
        ablation = self.train.ablation
        if (
            ablation.uses_segmenter
            and not ablation.seg_on_reconstructed_cryo
            and not self.train.seg_on_literal_cryo
            and not self.generator.use_dual_decoder
        ):
            raise ConfigError("сегментационная потеря по c′ требует generator.use_dual_decoder")

    def with_ablation(self, name: str) -> "ExperimentConfig":
        train = dataclasses.replace(self.train, ablation=AblationFlags.from_name(name))
        return dataclasses.replace(self, train=train)

    def resolved_generator(self) -> GeneratorConfig:
        """Конфиг генератора G m->ĉ с учётом абляции."""
        ablation = self.train.ablation
        cfg = self.generator
        if not ablation.uses_pseudo_decoder:
            cfg = dataclasses.replace(cfg, use_dual_decoder=False, inter_decoder_skips=False)
        if ablation.disable_se_blocks:
            cfg = dataclasses.replace(cfg, use_se_skips=False)
        return cfg

    def resolved_discriminator(self, in_channels: int, image_size: int) -> DiscriminatorConfig:
        return dataclasses.replace(self.discriminator, in_channels=in_channels, image_size=image_size)

    def resolved_segmenter(self, num_classes: int) -> UNetConfig:
        return dataclasses.replace(self.segmenter, in_channels=3, out_channels=num_classes)

    def image_size_for(self, dataset_image_size: int) -> int:
        wanted = self.train.image_size
        if wanted is not None and wanted != dataset_image_size:
            raise ConfigError(f"train.image_size={wanted}, а в датасете {dataset_image_size}")
        return dataset_image_size


@dataclass
class ModelSet:
    """Четыре обучаемые сети цикла и (опционально) замороженный сегментатор."""

    g_mc: ColorizationGenerator
    g_cm: ReverseGenerator
    d_c: Discriminator
    d_m: Discriminator
    segmenter: UNet | None = None

    def named(self) -> dict[str, nn.Module]:
        models = {"g_mc": self.g_mc, "g_cm": self.g_cm, "d_c": self.d_c, "d_m": self.d_m}
        if self.segmenter is not None:
            models["segmenter"] = self.segmenter
        return models

    def generators(self) -> list[nn.Module]:
        return [self.g_mc, self.g_cm]

    def discriminators(self) -> list[nn.Module]:
        return [self.d_c, self.d_m]


def architecture_fingerprint(cfg: ExperimentConfig, image_size: int, num_classes: int) -> str:
    """Хэш разрешённых конфигов всех сетей цикла."""
    segmenter = cfg.resolved_segmenter(num_classes) if cfg.train.ablation.uses_segmenter else None
    return sha256_json({
        "generator": to_dict(cfg.resolved_generator()),
        "discriminator_c": to_dict(cfg.resolved_discriminator(3, image_size)),
        "discriminator_m": to_dict(cfg.resolved_discriminator(1, image_size)),
        "segmenter": to_dict(segmenter) if segmenter is not None else None,
        "image_size": image_size,
        "num_classes": num_classes,
    })


def segmenter_fingerprint(cfg: ExperimentConfig, num_classes: int) -> str:
    return sha256_json({"segmenter": to_dict(cfg.resolved_segmenter(num_classes))})


def freeze(module: nn.Module) -> nn.Module:
    """Режим eval и requires_grad=False для всех параметров."""
    module.eval()
    for parameter in module.parameters():
        parameter.requires_grad_(False)
    return module


def build_models(cfg: ExperimentConfig, image_size: int, num_classes: int, device="cpu") -> ModelSet:
    """Собирает сети по конфигу; инициализация детерминирована seed'ом train.seed."""
    cfg.validate()
    torch.manual_seed(cfg.train.seed)
    generator_cfg = cfg.resolved_generator()
    models = ModelSet(
        g_mc=ColorizationGenerator(generator_cfg),
        g_cm=ReverseGenerator(generator_cfg),
        d_c=Discriminator(cfg.resolved_discriminator(3, image_size)),
        d_m=Discriminator(cfg.resolved_discriminator(1, image_size)),
        segmenter=UNet(cfg.resolved_segmenter(num_classes)) if cfg.train.ablation.uses_segmenter else None,
    )
    for module in models.named().values():
        module.to(device)
    if models.segmenter is not None:
        freeze(models.segmenter)
    logging.info(
        "Модели собраны (абляция %s): G m->c %s параметров",
        cfg.train.ablation.name, sum(p.numel() for p in models.g_mc.parameters()),
    )
    return models


def config_from_checkpoint(document: dict) -> ExperimentConfig:
    config = dict(document["config"])
    config.pop("version", None)
    return from_dict(ExperimentConfig, config)


def load_colorizer(checkpoint, device="cpu"):
    """
    Восстанавливает G m->ĉ из чекпоинта обучения для инференса.
    Отпечаток пересчитывается по сохранённому конфигу и сверяется с записанным.
    Возвращает (генератор в режиме eval, отпечаток).
    """
    document = load_checkpoint(checkpoint, map_location=device)
    cfg = config_from_checkpoint(document)
    dataset = document["dataset"]
    fingerprint = architecture_fingerprint(cfg, dataset["image_size"], dataset["num_classes"])
    if document.get("fingerprint") != fingerprint:
        raise CheckpointError("отпечаток архитектуры не совпадает с сохранённым конфигом", checkpoint)

    generator = ColorizationGenerator(cfg.resolved_generator())
    generator.load_state_dict(document["models"]["g_mc"])
    generator.to(device)
    return freeze(generator), fingerprint
