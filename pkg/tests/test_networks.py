"""
Тесты сетей: SE-блок, мультимасштабный вход, генераторы, дискриминатор, U-Net.
"""

# --- Стандартные библиотеки ---
from dataclasses import replace

# --- Сторонние библиотеки ---
import pytest
import torch

# --- Модули проекта ---
from app.colorization.networks import (
    ColorizationGenerator,
    Discriminator,
    DiscriminatorConfig,
    GeneratorConfig,
    Modality,
    MultiscaleFusion,
    ResidualBlock,
    ReverseGenerator,
    SEBlock,
    SEBlockConfig,
    UNet,
    UNetConfig,
    check_modality,
    count_modules,
    parameter_count,
)
from app.colorization.phantom import downsample
from app.core.errors import ConfigError, ShapeError


# --- SE-блок ---

def test_se_zero_input_gives_zero():
    se = SEBlock(SEBlockConfig(16, 4))
    assert torch.equal(se(torch.zeros(2, 16, 8, 8)), torch.zeros(2, 16, 8, 8))


def test_se_saturated_gate_is_identity():
    se = SEBlock(SEBlockConfig(16, 4))
    with torch.no_grad():
        se.compress.weight.zero_()
        se.compress.bias.zero_()
        se.activate.weight.zero_()
        se.activate.bias.fill_(1e4)
    f = torch.rand(2, 16, 8, 8)
    assert torch.equal(se(f), f)


def test_se_scales_each_channel_by_one_weight():
    se = SEBlock(SEBlockConfig(16, 4))
    f = torch.rand(3, 16, 8, 8) + 0.1
    gate = se.gate(f)
    out = se(f)

    assert gate.shape == (3, 16)
    assert torch.all(gate > 0) and torch.all(gate < 1)
    torch.testing.assert_close(out, f * gate[:, :, None, None])
    assert torch.all(out.abs() <= f.abs())


def test_se_rejects_wrong_channels():
    se = SEBlock(SEBlockConfig(16, 4))
    with pytest.raises(ShapeError):
        se(torch.rand(1, 8, 4, 4))


def test_se_config_requires_divisible_channels():
    with pytest.raises(ConfigError):
        SEBlockConfig(10, 8).validate()


# --- Мультимасштабный вход ---

@pytest.mark.parametrize("size", [256, 64])
def test_multiscale_fusion_shape(size):
    fusion = MultiscaleFusion(1, 64)
    out = fusion(torch.rand(1, 1, size, size))
    assert out.shape == (1, 128, size // 4, size // 4)


def test_multiscale_fusion_without_quarter_path():
    fusion = MultiscaleFusion(1, 8)
    with torch.no_grad():
        for parameter in fusion.quarter.parameters():
            parameter.zero_()
    m = torch.rand(1, 1, 32, 32)

    out = fusion(m)
    torch.testing.assert_close(out[:, 8:], fusion.half(downsample(m, 2)))
    torch.testing.assert_close(out[:, :8], fusion.full(m))


def test_multiscale_fusion_constant_coarse_paths():
    fusion = MultiscaleFusion(1, 8)
    with torch.no_grad():
        fusion.half[0].weight.zero_()
        fusion.half[0].bias.fill_(0.1)
        fusion.quarter[0].weight.zero_()
        fusion.quarter[0].bias.fill_(0.2)

    out = fusion(torch.rand(1, 1, 32, 32))
    torch.testing.assert_close(out[:, 8:], torch.full((1, 8, 8, 8), 0.3))


def test_multiscale_fusion_rejects_indivisible():
    with pytest.raises(ShapeError):
        MultiscaleFusion(1, 8)(torch.rand(1, 1, 30, 30))


# --- Генераторы ---

def test_colorization_generator_shapes(tiny_generator_cfg):
    generator = ColorizationGenerator(tiny_generator_cfg)
    c_hat, c_prime = generator(torch.rand(2, 1, 64, 64))

    assert c_hat.shape == (2, 3, 64, 64)
    assert c_prime.shape == (2, 3, 64, 64)
    for image in (c_hat, c_prime):
        assert image.min() >= 0.0 and image.max() <= 1.0


def test_colorization_generator_full_resolution(tiny_generator_cfg):
    c_hat, c_prime = ColorizationGenerator(tiny_generator_cfg)(torch.rand(1, 1, 256, 256))
    assert c_hat.shape == (1, 3, 256, 256)
    assert c_prime.shape == (1, 3, 256, 256)


@pytest.mark.parametrize("size", [20, 36, 48])
def test_generator_pads_and_crops_odd_multiples(tiny_generator_cfg, size):
    c_hat, c_prime = ColorizationGenerator(tiny_generator_cfg)(torch.rand(1, 1, size, size))
    assert c_hat.shape == (1, 3, size, size)
    assert c_prime.shape == (1, 3, size, size)


@pytest.mark.parametrize("size", [62, 12])
def test_generator_rejects_bad_sides(tiny_generator_cfg, size):
    with pytest.raises(ShapeError):
        ColorizationGenerator(tiny_generator_cfg)(torch.rand(1, 1, size, size))


def test_generator_rejects_wrong_modality(tiny_generator_cfg):
    with pytest.raises(ShapeError):
        ColorizationGenerator(tiny_generator_cfg)(torch.rand(1, 3, 32, 32))
    with pytest.raises(ShapeError):
        ReverseGenerator(tiny_generator_cfg)(torch.rand(1, 1, 32, 32))


def test_generator_is_batch_equivariant(tiny_generator_cfg):
    generator = ColorizationGenerator(tiny_generator_cfg)
    m = torch.rand(3, 1, 32, 32)
    with torch.no_grad():
        batched, _ = generator(m)
        single = torch.cat([generator(m[i:i + 1])[0] for i in range(3)])
    torch.testing.assert_close(batched, single, atol=1e-5, rtol=1e-5)


def test_generator_forward_is_deterministic(tiny_generator_cfg):
    generator = ColorizationGenerator(tiny_generator_cfg)
    m = torch.rand(1, 1, 32, 32)
    with torch.no_grad():
        assert torch.equal(generator(m)[0], generator(m)[0])


def test_single_decoder_generator(tiny_generator_cfg):
    single_cfg = replace(tiny_generator_cfg, use_dual_decoder=False, inter_decoder_skips=False)
    single = ColorizationGenerator(single_cfg)
    c_hat, c_prime = single(torch.rand(1, 1, 32, 32))

    assert c_hat.shape == (1, 3, 32, 32)
    assert c_prime is None
    assert parameter_count(single) < parameter_count(ColorizationGenerator(tiny_generator_cfg))


def test_inter_decoder_skips_need_two_decoders(tiny_generator_cfg):
    with pytest.raises(ConfigError):
        ColorizationGenerator(replace(tiny_generator_cfg, use_dual_decoder=False))


def test_generator_depth_must_be_at_least_two(tiny_generator_cfg):
    with pytest.raises(ConfigError):
        ColorizationGenerator(replace(tiny_generator_cfg, depth=1))


@pytest.mark.parametrize("direction", ["pseudo_to_color", "color_to_pseudo"])
def test_se_block_count(tiny_generator_cfg, direction):
    cfg = replace(tiny_generator_cfg, inter_decoder_direction=direction)
    generator = ColorizationGenerator(cfg)
    assert count_modules(generator, SEBlock) == 3 * cfg.depth

    c_hat, c_prime = generator(torch.rand(1, 1, 32, 32))
    assert c_hat.shape == c_prime.shape == (1, 3, 32, 32)


def test_se_block_count_without_inter_skips(tiny_generator_cfg):
    cfg = replace(tiny_generator_cfg, inter_decoder_skips=False)
    assert count_modules(ColorizationGenerator(cfg), SEBlock) == 2 * cfg.depth


def test_residual_skips_replace_se_blocks(tiny_generator_cfg):
    cfg = replace(tiny_generator_cfg, use_se_skips=False)
    generator = ColorizationGenerator(cfg)

    assert count_modules(generator, SEBlock) == 0
    assert count_modules(generator, ResidualBlock) == cfg.num_residual_blocks + 3 * cfg.depth
    assert generator(torch.rand(1, 1, 32, 32))[0].shape == (1, 3, 32, 32)


def test_single_scale_stem(tiny_generator_cfg):
    cfg = replace(tiny_generator_cfg, use_multiscale=False)
    generator = ColorizationGenerator(cfg)

    assert count_modules(generator, MultiscaleFusion) == 0
    c_hat, _ = generator(torch.rand(1, 1, 32, 32))
    assert c_hat.shape == (1, 3, 32, 32)


def test_reverse_generator_shapes(tiny_generator_cfg):
    reverse = ReverseGenerator(tiny_generator_cfg)
    for size in (128, 64):
        m_hat = reverse(torch.rand(1, 3, size, size))
        assert m_hat.shape == (1, 1, size, size)
        assert m_hat.min() >= 0.0 and m_hat.max() <= 1.0
    assert reverse.pseudo_decoder is None


def test_gradients_reach_every_layer(tiny_generator_cfg):
    generator = ColorizationGenerator(tiny_generator_cfg)
    c_hat, c_prime = generator(torch.rand(2, 1, 32, 32))
    (c_hat.sum() + c_prime.sum()).backward()

    for name, module in generator.named_modules():
        own = list(module.parameters(recurse=False))
        if not own:
            continue
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in own), name


def test_weight_initialization(tiny_generator_cfg):
    generator = ColorizationGenerator(tiny_generator_cfg)
    for module in generator.modules():
        if isinstance(module, (torch.nn.Conv2d, torch.nn.ConvTranspose2d, torch.nn.Linear)):
            assert module.weight.abs().max() <= 0.04
            assert torch.count_nonzero(module.bias) == 0


# --- Дискриминатор ---

def test_discriminator_scores_in_open_interval():
    discriminator = Discriminator(DiscriminatorConfig(in_channels=3, image_size=256, base_channels=4))
    scores = discriminator(torch.rand(3, 3, 256, 256))

    assert scores.shape == (3,)
    assert torch.all(scores > 0) and torch.all(scores < 1)
    assert count_modules(discriminator, torch.nn.Conv2d) == 5


def test_discriminator_zero_weights_give_half():
    discriminator = Discriminator(DiscriminatorConfig(in_channels=1, image_size=64, base_channels=4))
    with torch.no_grad():
        for parameter in discriminator.parameters():
            parameter.zero_()
    torch.testing.assert_close(discriminator(torch.rand(2, 1, 64, 64)), torch.full((2,), 0.5))


def test_discriminator_rejects_wrong_input():
    discriminator = Discriminator(DiscriminatorConfig(in_channels=3, image_size=64, base_channels=4))
    with pytest.raises(ShapeError):
        discriminator(torch.rand(1, 1, 64, 64))
    with pytest.raises(ShapeError):
        discriminator(torch.rand(1, 3, 32, 32))


def test_discriminator_has_exactly_five_convolutions():
    with pytest.raises(ConfigError):
        Discriminator(DiscriminatorConfig(num_conv_layers=4))


# --- U-Net ---

def test_unet_outputs_probabilities():
    unet = UNet(UNetConfig(in_channels=3, out_channels=4, depth=2, base_channels=8))
    probabilities = unet(torch.rand(2, 3, 32, 32))

    assert probabilities.shape == (2, 4, 32, 32)
    torch.testing.assert_close(probabilities.sum(dim=1), torch.ones(2, 32, 32), atol=1e-6, rtol=0)
    assert torch.all(probabilities >= 0)


def test_unet_rejects_indivisible_input():
    unet = UNet(UNetConfig(in_channels=3, out_channels=4, depth=2, base_channels=8))
    with pytest.raises(ShapeError):
        unet(torch.rand(1, 3, 30, 30))


def test_check_modality():
    check_modality(torch.rand(1, 1, 8, 8), Modality.MRI)
    check_modality(torch.rand(1, 5, 8, 8), Modality.SEG, channels=5)
    with pytest.raises(ShapeError):
        check_modality(torch.rand(1, 8, 8), Modality.MRI)
    with pytest.raises(ShapeError):
        check_modality(torch.rand(1, 4, 8, 8), Modality.SEG, channels=5)
