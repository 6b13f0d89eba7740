"""
Общие фикстуры тестов: маленькие конфиги и датасет 32x32, чтобы всё шло на CPU за секунды.
Долгие проверки помечены @pytest.mark.slow и запускаются с --runslow.
"""

# --- Стандартные библиотеки ---
import dataclasses

# --- Сторонние библиотеки ---
import numpy as np
import pytest
import torch

# --- Модули проекта ---
from app.colorization.experiment import DatasetConfig, ExperimentConfig, TrainConfig
from app.colorization.losses import LossWeights, SSIMConstants
from app.colorization.networks import DiscriminatorConfig, GeneratorConfig, UNetConfig
from app.colorization.phantom import PhantomSpec, generate_dataset
from app.colorization.training import pretrain_segmenter


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="запускать долгие тесты")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="долгий тест, нужен --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_spec():
    return PhantomSpec(image_size=32, num_classes=4, deformation_amplitude=2.0, seed=3)


@pytest.fixture
def tiny_generator_cfg():
    return GeneratorConfig(base_channels=8, depth=2, num_residual_blocks=1, se_reduction=4)


@pytest.fixture
def make_config(tiny_spec, tiny_generator_cfg):
    """Фабрика маленького ExperimentConfig; ключевые слова переопределяют поля train."""

    def _make(**train_overrides):
        train = TrainConfig(
            epochs=2,
            batch_size=4,
            checkpoint_every=2,
            seg_epochs=1,
            seg_batch_size=4,
            lr_segmenter_pretrain=1e-3,
            device="cpu",
            log_every=1,
        )
        return ExperimentConfig(
            phantom=tiny_spec,
            dataset=DatasetConfig(n_train=8, n_test=4),
            generator=tiny_generator_cfg,
            discriminator=DiscriminatorConfig(base_channels=4),
            segmenter=UNetConfig(depth=2, base_channels=8),
            train=dataclasses.replace(train, **train_overrides),
        )

    return _make


@pytest.fixture
def tiny_config(make_config):
    return make_config()


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec):
    return generate_dataset(tiny_spec, n_train=8, n_test=4, root=tmp_path / "data")


@pytest.fixture
def tiny_segmenter(tiny_dataset, tiny_config):
    segmenter, _ = pretrain_segmenter(tiny_dataset, tiny_config)
    return segmenter


def brute_force_ssim(a: np.ndarray, b: np.ndarray, patch: int, k: SSIMConstants) -> np.ndarray:
    """SSIM-карта двойным циклом по пикселям, окно с reflect-дополнением."""
    pad = patch // 2
    pa, pb = np.pad(a, pad, mode="reflect"), np.pad(b, pad, mode="reflect")
    result = np.empty_like(a)
    for y in range(a.shape[0]):
        for x in range(a.shape[1]):
            wa, wb = pa[y:y + patch, x:x + patch], pb[y:y + patch, x:x + patch]
            mu_a, mu_b = wa.mean(), wb.mean()
            sigma_a, sigma_b = wa.std(), wb.std()
            cov = ((wa - mu_a) * (wb - mu_b)).mean()
            lum = (2 * mu_a * mu_b + k.c1) / (mu_a ** 2 + mu_b ** 2 + k.c1)
            contrast = (2 * sigma_a * sigma_b + k.c2) / (sigma_a ** 2 + sigma_b ** 2 + k.c2)
            structure = (cov + k.resolved_c3) / (sigma_a * sigma_b + k.resolved_c3)
            result[y, x] = lum * contrast * structure
    return result


@pytest.fixture
def ssim_oracle():
    return brute_force_ssim


@pytest.fixture
def rec_only_weights():
    return LossWeights(adv=0.0, rec=1.0, ssim=0.0, seg=0.0)
