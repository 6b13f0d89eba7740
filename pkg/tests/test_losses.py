"""
Тесты функций потерь: эталонные значения, прямой пересчёт по формулам и
сверка аналитических градиентов с конечными разностями (float64).
"""

# --- Стандартные библиотеки ---
import logging
import math

# --- Сторонние библиотеки ---
import numpy as np
import pytest
import torch

# --- Модули проекта ---
from app.colorization.losses import (
    LossWeights,
    SSIMConstants,
    adversarial_losses,
    generator_adversarial_loss,
    local_ssim_map,
    luminance,
    reconstruction_loss,
    segmentation_ce,
    segmentation_loss,
    ssim_pair_loss,
    total_objective,
    total_ssim_loss,
)
from app.colorization.networks import UNet, UNetConfig
from app.core.errors import ConfigError, ShapeError, TrainingError


def finite_difference(fn, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Центральные разности скалярной fn по каждому элементу x."""
    grad = torch.zeros_like(x)
    flat, out = x.detach().clone().view(-1), grad.view(-1)
    for i in range(flat.numel()):
        original = flat[i].item()
        flat[i] = original + h
        plus = fn(flat.view_as(x)).item()
        flat[i] = original - h
        minus = fn(flat.view_as(x)).item()
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def assert_gradient_matches(fn, x: torch.Tensor, rtol: float = 1e-4):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    numeric = finite_difference(fn, x.detach())
    error = (x.grad - numeric).norm() / numeric.norm().clamp_min(1e-12)
    assert error < rtol


# --- Локальный SSIM ---

def test_ssim_map_identity_is_one():
    a = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    for patch in (3, 5, 7, 9):
        torch.testing.assert_close(local_ssim_map(a, a, patch), torch.ones_like(a), atol=1e-7, rtol=0)


def test_ssim_map_black_vs_white():
    k = SSIMConstants()
    black = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    white = torch.ones(1, 1, 16, 16, dtype=torch.float64)
    expected = k.c1 / (1 + k.c1)
    torch.testing.assert_close(
        local_ssim_map(black, white, 7), torch.full_like(black, expected), atol=1e-9, rtol=0
    )


@pytest.mark.parametrize("patch", [3, 5, 7, 9])
def test_ssim_map_matches_brute_force(patch, ssim_oracle):
    rng = np.random.default_rng(patch)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    k = SSIMConstants()
    expected = ssim_oracle(a, b, patch, k)
    actual = local_ssim_map(torch.from_numpy(a)[None, None], torch.from_numpy(b)[None, None], patch, k)
    np.testing.assert_allclose(actual[0, 0].numpy(), expected, atol=1e-6)


def test_ssim_map_is_symmetric():
    a, b = torch.rand(1, 1, 16, 16, dtype=torch.float64), torch.rand(1, 1, 16, 16, dtype=torch.float64)
    torch.testing.assert_close(local_ssim_map(a, b, 5), local_ssim_map(b, a, 5))


def test_ssim_rejects_even_patch_and_shape_mismatch():
    a = torch.rand(1, 1, 16, 16)
    with pytest.raises(ConfigError):
        local_ssim_map(a, a, 4)
    with pytest.raises(ShapeError):
        local_ssim_map(a, torch.rand(1, 1, 16, 12), 3)


def test_ssim_pair_loss_values():
    k = SSIMConstants()
    a = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    assert float(ssim_pair_loss(a, a)) == pytest.approx(0.0, abs=1e-6)

    black = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    white = torch.ones(1, 1, 16, 16, dtype=torch.float64)
    expected = 4 * (1 - k.c1 / (1 + k.c1))
    assert float(ssim_pair_loss(black, white)) == pytest.approx(expected, abs=1e-6)


def test_ssim_pair_loss_cross_modal_uses_luminance():
    m = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    assert float(ssim_pair_loss(m, m.repeat(1, 3, 1, 1))) == pytest.approx(0.0, abs=1e-6)


def test_ssim_pair_loss_gradient():
    torch.manual_seed(1)
    a = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    b = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    assert_gradient_matches(lambda x: ssim_pair_loss(x, b), a)


def test_total_ssim_loss_zero_for_consistent_outputs():
    m = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    c = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    total, components = total_ssim_loss(m, c, m.repeat(1, 3, 1, 1), luminance(c), c)

    assert float(total) == pytest.approx(0.0, abs=1e-6)
    assert set(components) == {"ssim_m_chat", "ssim_c_mhat", "ssim_c_cprime"}


def test_total_ssim_loss_is_sum_of_components():
    m = torch.rand(1, 1, 16, 16, dtype=torch.float64)
    c, c_hat, c_prime = (torch.rand(1, 3, 16, 16, dtype=torch.float64) for _ in range(3))
    m_hat = torch.rand(1, 1, 16, 16, dtype=torch.float64)

    total, components = total_ssim_loss(m, c, c_hat, m_hat, c_prime)
    assert float(total) == pytest.approx(sum(float(v) for v in components.values()), abs=1e-9)

    without_pseudo, parts = total_ssim_loss(m, c, c_hat, m_hat, None)
    assert parts["ssim_c_cprime"] is None
    assert float(without_pseudo) == pytest.approx(
        float(components["ssim_m_chat"] + components["ssim_c_mhat"]), abs=1e-9
    )


# --- Состязательные потери ---

class ConstantScore(torch.nn.Module):
    """Дискриминатор-заглушка с постоянной оценкой."""

    def __init__(self, value: float):
        super().__init__()
        self.value = value
        self.scale = torch.nn.Parameter(torch.ones((), dtype=torch.float64))

    def forward(self, img):
        return torch.full((img.shape[0],), self.value, dtype=torch.float64) * self.scale


class PerfectScore(torch.nn.Module):
    """Отличает «настоящие» (средняя яркость > 0.5) от фейков."""

    def forward(self, img):
        return (img.mean(dim=(1, 2, 3)) > 0.5).double()


def test_adversarial_losses_at_equilibrium():
    d_c, d_m = ConstantScore(0.5), ConstantScore(0.5)
    real_c, fake_c = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    real_m, fake_m = torch.rand(2, 1, 8, 8), torch.rand(2, 1, 8, 8)
    loss_d, loss_g = adversarial_losses(real_c, fake_c, real_m, fake_m, d_c, d_m)

    assert float(loss_d) == pytest.approx(4 * math.log(2), abs=1e-6)
    assert float(loss_g) == pytest.approx(2 * math.log(2), abs=1e-6)


def test_perfect_discriminator_has_near_zero_loss():
    d = PerfectScore()
    real_c, fake_c = torch.ones(2, 3, 8, 8), torch.zeros(2, 3, 8, 8)
    real_m, fake_m = torch.ones(2, 1, 8, 8), torch.zeros(2, 1, 8, 8)
    loss_d, _ = adversarial_losses(real_c, fake_c, real_m, fake_m, d, d)
    assert float(loss_d) < 1e-5


def test_discriminator_loss_does_not_reach_generator():
    weight = torch.nn.Parameter(torch.tensor(0.7))
    fake_c = torch.rand(2, 3, 8, 8) * weight
    fake_m = torch.rand(2, 1, 8, 8) * weight
    d_c, d_m = ConstantScore(0.3), ConstantScore(0.6)

    loss_d, _ = adversarial_losses(torch.rand(2, 3, 8, 8), fake_c, torch.rand(2, 1, 8, 8), fake_m, d_c, d_m)
    loss_d.backward()
    assert weight.grad is None
    assert d_c.scale.grad is not None


def test_extra_fake_adds_terms():
    d = ConstantScore(0.5)
    real_c, fake_c = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    real_m, fake_m = torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8)
    loss_d, loss_g = adversarial_losses(real_c, fake_c, real_m, fake_m, d, d, extra_fake_c=fake_c)

    assert float(loss_d) == pytest.approx(5 * math.log(2), abs=1e-6)
    assert float(loss_g) == pytest.approx(3 * math.log(2), abs=1e-6)


def test_generator_adversarial_gradient():
    torch.manual_seed(2)
    weight = torch.rand(1, 1, 8, 8, dtype=torch.float64) - 0.5

    def discriminator(img):
        return torch.sigmoid((img * weight).sum(dim=(1, 2, 3)))

    fake = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    assert_gradient_matches(lambda x: generator_adversarial_loss(discriminator, [x]), fake)


# --- Реконструкция ---

def test_reconstruction_loss_values():
    m = torch.rand(2, 1, 8, 8, dtype=torch.float64) * 0.9
    c = torch.rand(2, 3, 8, 8, dtype=torch.float64) * 0.9
    assert float(reconstruction_loss(m, m, c, c)) == 0.0
    assert float(reconstruction_loss(m, m + 0.1, c, c)) == pytest.approx(0.1, abs=1e-9)


def test_reconstruction_loss_is_batch_order_invariant():
    m, m_rec = torch.rand(4, 1, 8, 8), torch.rand(4, 1, 8, 8)
    c, c_rec = torch.rand(4, 3, 8, 8), torch.rand(4, 3, 8, 8)
    perm = torch.tensor([2, 0, 3, 1])
    torch.testing.assert_close(
        reconstruction_loss(m, m_rec, c, c_rec),
        reconstruction_loss(m[perm], m_rec[perm], c[perm], c_rec[perm]),
    )


def test_reconstruction_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        reconstruction_loss(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 4, 4), torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8))


def test_reconstruction_loss_gradient():
    generator = torch.Generator().manual_seed(3)
    m = torch.rand(1, 1, 8, 8, dtype=torch.float64, generator=generator)
    c = torch.rand(1, 3, 8, 8, dtype=torch.float64, generator=generator)
    # смещения не меньше 0.05 по модулю: |x| дифференцируем вдали от нуля
    sign = (torch.rand(1, 1, 8, 8, generator=generator) > 0.5).double() * 2 - 1
    offset = sign * (0.05 + 0.25 * torch.rand(1, 1, 8, 8, dtype=torch.float64, generator=generator))
    assert_gradient_matches(lambda x: reconstruction_loss(m, x, c, c + 0.1), m + offset)


# --- Сегментация ---

def one_hot_batch(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(labels, num_classes).permute(0, 3, 1, 2).double()


def test_segmentation_ce_perfect_and_uniform():
    s = one_hot_batch(torch.randint(0, 4, (2, 8, 8)), 4)
    assert float(segmentation_ce(s, s)) == pytest.approx(0.0, abs=1e-9)
    assert float(segmentation_ce(s, torch.full_like(s, 0.25))) == pytest.approx(math.log(4), abs=1e-9)


def test_segmentation_ce_matches_triple_loop():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 4, size=(6, 6))
    logits = rng.standard_normal((4, 6, 6))
    probs = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
    s = np.eye(4)[labels].transpose(2, 0, 1)

    expected = 0.0
    for k in range(4):
        for j in range(6):
            for i in range(6):
                expected -= s[k, j, i] * math.log(probs[k, j, i])
    expected /= 36

    actual = segmentation_ce(torch.from_numpy(s)[None], torch.from_numpy(probs)[None])
    assert float(actual) == pytest.approx(expected, abs=1e-9)


def test_segmentation_ce_clamps_and_warns(caplog):
    s = one_hot_batch(torch.zeros(1, 4, 4, dtype=torch.long), 2)
    s_hat = torch.zeros_like(s)
    s_hat[:, 1] = 1.0
    with caplog.at_level(logging.WARNING):
        value = segmentation_ce(s, s_hat)
    assert math.isfinite(float(value))
    assert float(value) == pytest.approx(-math.log(1e-12), rel=1e-9)
    assert "клэмп" in caplog.text


def test_segmentation_ce_shape_mismatch():
    with pytest.raises(ShapeError):
        segmentation_ce(torch.rand(1, 4, 8, 8), torch.rand(1, 3, 8, 8))


def test_segmentation_ce_gradient():
    s = one_hot_batch(torch.randint(0, 3, (1, 8, 8)), 3)
    s_hat = torch.softmax(torch.randn(1, 3, 8, 8, dtype=torch.float64), dim=1)
    assert_gradient_matches(lambda x: segmentation_ce(s, x), s_hat)


def test_segmentation_loss_trains_only_pseudo_cryo():
    segmenter = UNet(UNetConfig(out_channels=4, depth=2, base_channels=8)).eval()
    for parameter in segmenter.parameters():
        parameter.requires_grad_(False)
    s = one_hot_batch(torch.randint(0, 4, (1, 16, 16)), 4).float()
    c_prime = torch.rand(1, 3, 16, 16, requires_grad=True)

    segmentation_loss(s, c_prime, segmenter).backward()
    assert c_prime.grad is not None and c_prime.grad.abs().sum() > 0
    assert all(parameter.grad is None for parameter in segmenter.parameters())


def test_segmentation_loss_class_mismatch():
    segmenter = UNet(UNetConfig(out_channels=4, depth=2, base_channels=8)).eval()
    with pytest.raises(ConfigError):
        segmentation_loss(torch.rand(1, 5, 16, 16), torch.rand(1, 3, 16, 16), segmenter)


# --- Полная цель ---

def test_total_objective_weighted_sum():
    total, bundle = total_objective(1.0, 2.0, 0.5, 0.25)
    assert total == pytest.approx(3.75)
    assert bundle.cyc == pytest.approx(3.0)
    assert bundle.total == pytest.approx(bundle.cyc + bundle.ssim_total + bundle.seg)

    doubled, _ = total_objective(1.0, 2.0, 0.5, 0.25, weights=LossWeights(adv=2.0, rec=2.0, ssim=2.0, seg=2.0))
    assert doubled == pytest.approx(7.5)


def test_total_objective_disabled_terms():
    total, bundle = total_objective(1.0, None, 0.5, None)
    assert total == pytest.approx(1.5)
    assert bundle.rec is None and bundle.seg is None
    assert bundle.cyc == pytest.approx(1.0)

    record = bundle.to_record(step=3, epoch=1)
    assert record["step"] == 3 and record["epoch"] == 1
    assert record["rec"] is None
    assert "weights" not in record


def test_total_objective_rejects_non_finite():
    with pytest.raises(TrainingError) as excinfo:
        total_objective(torch.tensor(float("nan")), 1.0, 0.5, 0.25, sample_ids=[4, 7])
    assert "adv_g" in excinfo.value.bundle
    assert excinfo.value.sample_ids == [4, 7]
