"""
Тесты конфигурации экспериментов, переопределений и атомарной записи файлов.
"""

# --- Стандартные библиотеки ---
import json

# --- Сторонние библиотеки ---
import pytest

# --- Модули проекта ---
from app.colorization.experiment import ABLATIONS, AblationFlags, ExperimentConfig
from app.core.config import CONFIG_VERSION, config_document, load_config, parse_override
from app.core.errors import ConfigError
from app.core.helpers import atomic_write, read_jsonl, sha256_json, write_json, write_jsonl


def test_defaults_are_valid():
    cfg = load_config(ExperimentConfig)
    cfg.validate()
    assert cfg.train.lr_generators == 1e-3
    assert cfg.train.lr_discriminators == 1e-4
    assert cfg.train.betas == (0.5, 0.999)
    assert cfg.train.batch_size == 28
    assert cfg.ssim.patch_sizes == (3, 5, 7, 9)


def test_overrides_are_typed():
    cfg = load_config(ExperimentConfig, overrides=[
        "train.lr_generators=2e-4",
        "generator.use_multiscale=false",
        "train.betas=[0.9, 0.99]",
        "train.ablation.disable_se_blocks=true",
        "train.device=cuda:1",
        "train.weights.seg=0.5",
    ])
    assert cfg.train.lr_generators == 2e-4
    assert cfg.generator.use_multiscale is False
    assert cfg.train.betas == (0.9, 0.99)
    assert cfg.train.ablation.disable_se_blocks is True
    assert cfg.train.ablation.name == "A5"
    assert cfg.train.device == "cuda:1"
    assert cfg.train.weights.seg == 0.5


@pytest.mark.parametrize(
    "override",
    [
        "train.no_such_key=1",
        "nosection.key=1",
        "train.epochs=abc",
        "train.epochs=1.5",
        "generator.use_multiscale=1",
        "generator.inter_decoder_direction=sideways",
        "train.betas=[0.9]",
        "train.lr_generators",
    ],
)
def test_bad_overrides_are_rejected(override):
    with pytest.raises(ConfigError):
        load_config(ExperimentConfig, overrides=[override])


def test_parse_override_falls_back_to_string():
    assert parse_override("train.device=cpu") == (["train", "device"], "cpu")
    assert parse_override("train.seed=7") == (["train", "seed"], 7)


def test_resolved_config_round_trip(tmp_path):
    cfg = load_config(ExperimentConfig, overrides=["train.seed=5", "phantom.num_classes=6"])
    path = tmp_path / "resolved_config.json"
    write_json(path, config_document(cfg))

    assert json.loads(path.read_text(encoding="utf-8"))["version"] == CONFIG_VERSION
    assert load_config(ExperimentConfig, path) == cfg


def test_unsupported_config_version(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"version": CONFIG_VERSION + 1}), encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(ExperimentConfig, path)


def test_unreadable_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(ExperimentConfig, path)


def test_ablation_flags_are_exclusive():
    cfg = load_config(ExperimentConfig, overrides=[
        "train.ablation.disable_cycle_rec=true",
        "train.ablation.disable_se_blocks=true",
    ])
    with pytest.raises(ConfigError):
        cfg.validate()


@pytest.mark.parametrize("name", list(ABLATIONS))
def test_ablation_names_round_trip(name):
    assert AblationFlags.from_name(name).name == name
    ExperimentConfig().with_ablation(name).validate()


def test_unknown_ablation_name():
    with pytest.raises(ConfigError):
        AblationFlags.from_name("A9")


def test_ablation_resolves_generator():
    base = ExperimentConfig()
    assert base.resolved_generator().use_dual_decoder

    for name in ("A3", "A4"):
        resolved = base.with_ablation(name).resolved_generator()
        assert not resolved.use_dual_decoder
        assert not resolved.inter_decoder_skips
    assert not base.with_ablation("A5").resolved_generator().use_se_skips
    assert not base.with_ablation("A2").train.ablation.uses_segmenter
    assert base.with_ablation("A4").train.ablation.uses_segmenter


def test_seg_loss_needs_pseudo_decoder():
    cfg = load_config(ExperimentConfig, overrides=[
        "generator.use_dual_decoder=false",
        "generator.inter_decoder_skips=false",
    ])
    with pytest.raises(ConfigError):
        cfg.validate()


def test_image_size_mismatch():
    cfg = load_config(ExperimentConfig, overrides=["train.image_size=128"])
    assert cfg.image_size_for(128) == 128
    with pytest.raises(ConfigError):
        cfg.image_size_for(256)


# --- Файлы ---

def test_atomic_write_leaves_no_partial_file(tmp_path):
    path = tmp_path / "out.txt"
    path.write_text("old", encoding="utf-8")

    def failing(f):
        f.write("partial")
        raise OSError("disk full")

    with pytest.raises(OSError):
        atomic_write(path, failing)
    assert path.read_text(encoding="utf-8") == "old"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_jsonl_round_trip(tmp_path):
    records = [{"step": 1, "total": 2.5}, {"step": 2, "total": None}]
    write_jsonl(tmp_path / "log.jsonl", records)
    assert read_jsonl(tmp_path / "log.jsonl") == records


def test_sha256_json_ignores_key_order():
    assert sha256_json({"a": 1, "b": [1, 2]}) == sha256_json({"b": [1, 2], "a": 1})
    assert sha256_json({"a": 1}) != sha256_json({"a": 2})
