"""
training.py — обучение и инференс колоризации.

- pretrain_segmenter : предобучение U-Net на парах (c, s), затем заморозка
- train_step         : один шаг цикла: прямой проход, шаг D_c/D_m, шаг генераторов
- train              : эпохи по перемешанному (с seed) train-сплиту, чекпоинты, loss_log.jsonl, резюме
- infer              : ĉ по одной MRI (Cryosection и сегментация не нужны)
- run_ablation_suite : полная модель + A1..A5 на общем датасете и seed, таблица метрик

Порядок шага: сначала дискриминаторы, затем генераторы (по одному шагу Adam на батч).
"""

from __future__ import annotations

# --- Стандартные библиотеки ---
import copy
import logging                          # Отслеживание работы/диагностика проблем
import math
from dataclasses import dataclass, field
from itertools import chain
from pathlib import Path

# --- Сторонние библиотеки ---
import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm                   # Прогресс эпох в терминале

# --- Модули проекта ---
from app.colorization.experiment import (
    ABLATIONS,
    ExperimentConfig,
    ModelSet,
    architecture_fingerprint,
    build_models,
    config_from_checkpoint,
    freeze,
    load_colorizer,
    segmenter_fingerprint,
)
from app.colorization.losses import (
    LossBundle,
    discriminator_loss,
    generator_adversarial_loss,
    reconstruction_loss,
    segmentation_loss,
    total_objective,
    total_ssim_loss,
)
from app.colorization.metrics import evaluate
from app.colorization.networks import UNet
from app.colorization.phantom import DatasetManifest, PhantomDataset
from app.core.checkpoints import (
    FINAL_NAME,
    checkpoint_name,
    latest_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from app.core.config import config_document
from app.core.errors import ColorizationError, ConfigError, ShapeError, TrainingError
from app.core.helpers import append_jsonl, write_json, write_jsonl

SEGMENTER_NAME  = "segmenter.pt"
LOSS_LOG_NAME   = "loss_log.jsonl"
NAN_BUNDLE_NAME = "nan_bundle.json"

# пары "хуже полной модели по SSIM": жёсткие (A1, A3, A5) и только для отчёта (A2, A4)
DIRECTIONAL_ROWS = ("A1", "A3", "A5")
REPORT_ONLY_ROWS = ("A2", "A4")


@dataclass
class TrainState:
    models: ModelSet
    optimizers: dict
    fingerprint: str
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    loss_log: list[dict] = field(default_factory=list)


@dataclass
class CycleOutputs:
    c_hat: torch.Tensor
    c_prime: torch.Tensor | None
    m_hat: torch.Tensor
    m_rec: torch.Tensor
    c_rec: torch.Tensor


@dataclass
class TrainResult:
    checkpoints: list[Path]
    final_checkpoint: Path | None
    loss_log: list[dict]
    stopped_early: bool = False


@dataclass
class AblationTable:
    rows: dict                          # имя абляции -> MetricReport | None
    errors: dict                        # имя абляции -> текст ошибки
    dataset_checksum: str
    warnings: list[str] = field(default_factory=list)      # A2, A4 не хуже полной модели
    violations: list[str] = field(default_factory=list)    # A1, A3, A5 лучше полной модели

    @staticmethod
    def label(name: str) -> str:
        return "Ours" if name == "full" else name

    def aggregates(self) -> dict:
        """Подпись строки -> агрегаты метрик (None для упавших строк)."""
        return {
            self.label(name): (report.aggregate if report is not None else None)
            for name, report in self.rows.items()
        }


# --- Вспомогательное ---

def set_requires_grad(modules, flag: bool) -> None:
    for module in modules:
        for parameter in module.parameters():
            parameter.requires_grad_(flag)


def make_optimizers(models: ModelSet, cfg: ExperimentConfig) -> dict:
    train = cfg.train
    optimizers = {
        "generators": torch.optim.Adam(
            chain(models.g_mc.parameters(), models.g_cm.parameters()), lr=train.lr_generators, betas=train.betas
        ),
        "discriminators": torch.optim.Adam(
            chain(models.d_c.parameters(), models.d_m.parameters()), lr=train.lr_discriminators, betas=train.betas
        ),
    }
    if models.segmenter is not None and not train.freeze_segmenter:
        # разморозка для экспериментов: сегментатор дообучается на lr предобучения
        set_requires_grad([models.segmenter], True)
        optimizers["segmenter"] = torch.optim.Adam(models.segmenter.parameters(), lr=train.lr_segmenter_pretrain)
    return optimizers


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    """Перестановка train-сплита эпохи; зависит только от (seed, epoch)."""
    generator = torch.Generator().manual_seed(seed * 100_003 + epoch)
    return torch.randperm(n, generator=generator).tolist()


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


# --- Сегментатор ---

def pixel_accuracy(segmenter: UNet, dataset, batch_size: int, device) -> float:
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    correct, total = 0, 0
    segmenter.eval()
    with torch.no_grad():
        for batch in loader:
            prediction = segmenter.logits(batch["c"].to(device)).argmax(dim=1)
            target = batch["s"].to(device).argmax(dim=1)
            correct += int((prediction == target).sum())
            total += target.numel()
    return correct / max(total, 1)


def pretrain_segmenter(manifest: DatasetManifest, cfg: ExperimentConfig, out_dir=None, resume: bool = True):
    """
    Обучает U-Net на парах (c, s) train-сплита до целевой пиксельной точности.
    Не достигнув цели за seg_epochs эпох — предупреждение и лучшие веса.
    Возвращает (замороженный сегментатор, история {"epoch", "loss", "accuracy"}).
    """
    train = cfg.train
    device = train.device
    num_classes = manifest.spec.num_classes
    fingerprint = segmenter_fingerprint(cfg, num_classes)

    torch.manual_seed(train.seed)
    segmenter = UNet(cfg.resolved_segmenter(num_classes)).to(device)
    optimizer = torch.optim.Adam(segmenter.parameters(), lr=train.lr_segmenter_pretrain)
    dataset = PhantomDataset(manifest, "train", limit=train.seg_max_pairs)
    history, start_epoch = [], 0
    best_accuracy, best_state = -1.0, None

    path = Path(out_dir) / SEGMENTER_NAME if out_dir is not None else None
    if resume and path is not None and path.exists():
        document = load_checkpoint(path, expected_fingerprint=fingerprint, map_location=device)
        segmenter.load_state_dict(document["models"]["segmenter"])
        optimizer.load_state_dict(document["optimizers"]["segmenter"])
        history = list(document["loss_log"])
        start_epoch = document["epoch"]
        best_accuracy = max((row["accuracy"] for row in history), default=-1.0)
        best_state = copy.deepcopy(segmenter.state_dict())
        logging.info("Предобучение сегментатора продолжено с эпохи %s", start_epoch)

    logging.info("Предобучение сегментатора: %s пар, lr %s", len(dataset), train.lr_segmenter_pretrain)
    for epoch in tqdm(range(start_epoch, train.seg_epochs), desc="segmenter", leave=False):
        if best_accuracy >= train.seg_target_accuracy:
            break
        segmenter.train()
        order = epoch_order(len(dataset), train.seed, epoch)
        loader = DataLoader(dataset, batch_size=train.seg_batch_size, sampler=order, num_workers=train.num_workers)
        losses = []
        for batch in loader:
            logits = segmenter.logits(batch["c"].to(device))
            loss = F.cross_entropy(logits, batch["s"].to(device).argmax(dim=1))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        accuracy = pixel_accuracy(segmenter, dataset, train.seg_batch_size, device)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "accuracy": accuracy})
        if accuracy > best_accuracy:
            best_accuracy, best_state = accuracy, copy.deepcopy(segmenter.state_dict())
        if path is not None:
            save_checkpoint(path, {
                "kind": "segmenter",
                "fingerprint": fingerprint,
                "config": config_document(cfg),
                "dataset": {"image_size": manifest.spec.image_size, "num_classes": num_classes},
                "models": {"segmenter": segmenter.state_dict()},
                "optimizers": {"segmenter": optimizer.state_dict()},
                "epoch": epoch + 1,
                "step": (epoch + 1) * steps_per_epoch(len(dataset), train.seg_batch_size),
                "loss_log": history,
            })

    if best_accuracy < train.seg_target_accuracy:
        logging.warning(
            "Сегментатор не достиг точности %s (лучшая %.4f), используются лучшие веса",
            train.seg_target_accuracy, best_accuracy,
        )
    else:
        logging.info("Сегментатор обучен: точность %.4f", best_accuracy)
    if best_state is not None:
        segmenter.load_state_dict(best_state)
        if path is not None and path.exists():
            # на диске остаются лучшие веса: их загружает train
            document = load_checkpoint(path, expected_fingerprint=fingerprint, map_location=device)
            document["models"]["segmenter"] = segmenter.state_dict()
            save_checkpoint(path, {key: value for key, value in document.items() if key != "version"})
    return freeze(segmenter), history


def load_segmenter(path, cfg: ExperimentConfig, num_classes: int, device="cpu") -> UNet:
    """Загружает предобученный сегментатор и замораживает его."""
    document = load_checkpoint(path, expected_fingerprint=segmenter_fingerprint(cfg, num_classes), map_location=device)
    segmenter = UNet(cfg.resolved_segmenter(num_classes))
    segmenter.load_state_dict(document["models"]["segmenter"])
    return freeze(segmenter.to(device))


# --- Шаг обучения ---

def init_state(cfg: ExperimentConfig, image_size: int, num_classes: int, segmenter: UNet | None = None) -> TrainState:
    device = cfg.train.device
    models = build_models(cfg, image_size, num_classes, device=device)
    if models.segmenter is not None and segmenter is not None:
        models.segmenter.load_state_dict(segmenter.state_dict())
    return TrainState(
        models=models,
        optimizers=make_optimizers(models, cfg),
        fingerprint=architecture_fingerprint(cfg, image_size, num_classes),
    )


def forward_cycle(models: ModelSet, m: torch.Tensor, c: torch.Tensor) -> CycleOutputs:
    """m -> (ĉ, c′) -> m_rec и c -> m̂ -> c_rec; в цикл идёт только основной выход ĉ."""
    c_hat, c_prime = models.g_mc(m)
    m_hat = models.g_cm(c)
    m_rec = models.g_cm(c_hat)
    c_rec, _ = models.g_mc(m_hat)
    return CycleOutputs(c_hat=c_hat, c_prime=c_prime, m_hat=m_hat, m_rec=m_rec, c_rec=c_rec)


def _fakes_c(outputs: CycleOutputs, cfg: ExperimentConfig) -> list:
    fakes = [outputs.c_hat]
    if cfg.train.pseudo_as_fake and outputs.c_prime is not None:
        fakes.append(outputs.c_prime)
    return fakes


def discriminator_step(state: TrainState, batch: dict, outputs: CycleOutputs, cfg: ExperimentConfig, sample_ids=()):
    """Шаг D_c и D_m; генераторы не меняются (фейки отсоединены)."""
    models = state.models
    set_requires_grad(models.discriminators(), True)
    loss_d = (
        discriminator_loss(models.d_c, batch["c"], _fakes_c(outputs, cfg))
        + discriminator_loss(models.d_m, batch["m"], [outputs.m_hat])
    )
    if not torch.isfinite(loss_d):
        logging.error("Нечисловая потеря дискриминаторов на шаге %s", state.step)
        raise TrainingError("потеря дискриминаторов не конечна", bundle={"adv_d": float(loss_d)}, sample_ids=sample_ids)
    optimizer = state.optimizers["discriminators"]
    optimizer.zero_grad()
    loss_d.backward()
    optimizer.step()
    return loss_d.detach()


def _segmentation_input(outputs: CycleOutputs, batch: dict, cfg: ExperimentConfig):
    if cfg.train.ablation.seg_on_reconstructed_cryo:
        return outputs.c_rec
    if cfg.train.seg_on_literal_cryo:
        return batch["c"]
    return outputs.c_prime


def generator_step(
    state: TrainState, batch: dict, outputs: CycleOutputs, cfg: ExperimentConfig, loss_d=None, sample_ids=()
) -> LossBundle:
    """Шаг обоих генераторов по полной цели; параметры дискриминаторов заморожены на время шага."""
    models = state.models
    ablation = cfg.train.ablation
    set_requires_grad(models.discriminators(), False)

    adv_g = (
        generator_adversarial_loss(models.d_c, _fakes_c(outputs, cfg))
        + generator_adversarial_loss(models.d_m, [outputs.m_hat])
    )
    rec = None
    if not ablation.disable_cycle_rec:
        rec = reconstruction_loss(batch["m"], outputs.m_rec, batch["c"], outputs.c_rec)
    ssim_total, components = total_ssim_loss(
        batch["m"], batch["c"], outputs.c_hat, outputs.m_hat, outputs.c_prime, cfg.ssim
    )
    seg = None
    if models.segmenter is not None:
        seg = segmentation_loss(batch["s"], _segmentation_input(outputs, batch, cfg), models.segmenter)

    total, bundle = total_objective(
        adv_g, rec, ssim_total, seg,
        weights=cfg.train.weights, ssim_components=components, adv_d=loss_d, sample_ids=sample_ids,
    )
    optimizers = [state.optimizers["generators"]]
    if "segmenter" in state.optimizers:
        optimizers.append(state.optimizers["segmenter"])
    for optimizer in optimizers:
        optimizer.zero_grad()
    total.backward()
    for optimizer in optimizers:
        optimizer.step()
    set_requires_grad(models.discriminators(), True)
    return bundle


def train_step(batch: dict, state: TrainState, cfg: ExperimentConfig):
    """Один чередующийся шаг: D, затем G. Возвращает (state, LossBundle)."""
    device = cfg.train.device
    sample_ids = [int(i) for i in batch.get("index", [])]
    tensors = {key: batch[key].to(device) for key in ("m", "c", "s")}
    for module in chain(state.models.generators(), state.models.discriminators()):
        module.train()

    outputs = forward_cycle(state.models, tensors["m"], tensors["c"])
    loss_d = discriminator_step(state, tensors, outputs, cfg, sample_ids)
    bundle = generator_step(state, tensors, outputs, cfg, loss_d, sample_ids)
    state.step += 1
    return state, bundle


# --- Чекпоинты ---

def state_payload(state: TrainState, cfg: ExperimentConfig, manifest: DatasetManifest, final: bool = False) -> dict:
    return {
        "kind": "cyclic",
        "fingerprint": state.fingerprint,
        "config": config_document(cfg),
        "dataset": {
            "image_size": manifest.spec.image_size,
            "num_classes": manifest.spec.num_classes,
            "checksum": manifest.checksum,
        },
        "models": {name: module.state_dict() for name, module in state.models.named().items()},
        "optimizers": {name: optimizer.state_dict() for name, optimizer in state.optimizers.items()},
        "step": state.step,
        "epoch": state.epoch,
        "batch_in_epoch": state.batch_in_epoch,
        "rng": torch.get_rng_state(),
        "loss_log": list(state.loss_log),
        "final": final,
    }


def restore_state(state: TrainState, document: dict) -> TrainState:
    for name, module in state.models.named().items():
        module.load_state_dict(document["models"][name])
    for name, optimizer in state.optimizers.items():
        optimizer.load_state_dict(document["optimizers"][name])
    state.step = document["step"]
    state.epoch = document["epoch"]
    state.batch_in_epoch = document["batch_in_epoch"]
    state.loss_log = list(document["loss_log"])
    torch.set_rng_state(document["rng"])
    return state


def _save(state, cfg, manifest, path, final=False):
    """Сохраняет чекпоинт; False — если диск не дал записать."""
    try:
        save_checkpoint(path, state_payload(state, cfg, manifest, final=final))
        return True
    except OSError as e:
        logging.error("Обучение остановлено: чекпоинт не записан (%s)", e)
        return False


def dump_failure(path, error: TrainingError, step: int, epoch: int) -> None:
    """Сохраняет значения потерь и номера образцов упавшего шага (NaN/Inf как строки)."""
    bundle = {
        key: value if value is None or math.isfinite(value) else str(value)
        for key, value in error.bundle.items()
    }
    write_json(path, {
        "step": step,
        "epoch": epoch,
        "message": str(error),
        "bundle": bundle,
        "sample_ids": error.sample_ids,
    })
    logging.error("Шаг %s прерван, потери сохранены: %s", step, path)


# --- Обучение ---

def train(
    manifest: DatasetManifest,
    cfg: ExperimentConfig,
    out_dir,
    segmenter: UNet | None = None,
    resume: bool = True,
    max_steps: int | None = None,
) -> TrainResult:
    """
    Полный цикл обучения. Чекпоинты — <out_dir>/checkpoints/step_XXXXXXXX.pt каждые
    checkpoint_every шагов и final.pt в конце; лог потерь — <out_dir>/loss_log.jsonl.
    max_steps обрывает обучение после заданного шага (с чекпоинтом), резюме продолжает с него.
    """
    cfg.validate()
    image_size = cfg.image_size_for(manifest.spec.image_size)
    num_classes = manifest.spec.num_classes
    if cfg.train.ablation.uses_segmenter and segmenter is None:
        raise ConfigError("нужен предобученный сегментатор (команда train-seg) или абляция A2/A3")

    out_dir = Path(out_dir)
    checkpoint_dir = out_dir / "checkpoints"
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOSS_LOG_NAME

    state = init_state(cfg, image_size, num_classes, segmenter)
    latest = None
    if resume:
        final_path = checkpoint_dir / FINAL_NAME
        latest = final_path if final_path.exists() else latest_checkpoint(checkpoint_dir)
    if latest is not None:
        restore_state(state, load_checkpoint(latest, expected_fingerprint=state.fingerprint, map_location=cfg.train.device))
        logging.info("Резюме обучения: шаг %s, эпоха %s", state.step, state.epoch)
    write_jsonl(log_path, state.loss_log)

    dataset = PhantomDataset(manifest, "train")
    per_epoch = steps_per_epoch(len(dataset), cfg.train.batch_size)
    saved = [latest] if latest is not None else []
    logging.info(
        "Обучение: %s пар, %s шагов на эпоху, %s эпох, абляция %s",
        len(dataset), per_epoch, cfg.train.epochs, cfg.train.ablation.name,
    )

    while state.epoch < cfg.train.epochs:
        order = epoch_order(len(dataset), cfg.train.seed, state.epoch)
        start = state.batch_in_epoch * cfg.train.batch_size
        loader = DataLoader(
            dataset, batch_size=cfg.train.batch_size, sampler=order[start:], num_workers=cfg.train.num_workers
        )
        for batch in tqdm(loader, desc=f"epoch {state.epoch}", leave=False):
            try:
                state, bundle = train_step(batch, state, cfg)
            except TrainingError as e:
                dump_failure(out_dir / NAN_BUNDLE_NAME, e, state.step + 1, state.epoch)
                raise
            state.batch_in_epoch += 1
            record = bundle.to_record(state.step, state.epoch)
            state.loss_log.append(record)
            append_jsonl(log_path, record)
            if state.step % cfg.train.log_every == 0:
                logging.info("Шаг %s: total %.4f, adv_d %.4f", state.step, bundle.total, bundle.adv_d)

            interrupted = max_steps is not None and state.step >= max_steps
            if state.step % cfg.train.checkpoint_every == 0 or interrupted:
                path = checkpoint_dir / checkpoint_name(state.step)
                if not _save(state, cfg, manifest, path):
                    return TrainResult(saved, None, state.loss_log, stopped_early=True)
                saved.append(path)
            if interrupted:
                logging.info("Обучение прервано на шаге %s", state.step)
                return TrainResult(saved, None, state.loss_log, stopped_early=True)
        state.epoch += 1
        state.batch_in_epoch = 0

    final = checkpoint_dir / FINAL_NAME
    if not _save(state, cfg, manifest, final, final=True):
        return TrainResult(saved, None, state.loss_log, stopped_early=True)
    logging.info("Обучение завершено: %s шагов", state.step)
    return TrainResult(saved + [final], final, state.loss_log)


# --- Инференс ---

def _as_mri_batch(m) -> torch.Tensor:
    if isinstance(m, np.ndarray):
        m = torch.from_numpy(np.ascontiguousarray(m, dtype=np.float32))
    while m.dim() < 4:
        m = m.unsqueeze(0)
    return m


def infer(checkpoint, m, device="cpu") -> torch.Tensor:
    """
    Колоризует MRI (h, w), (1, h, w) или (n, 1, h, w). Стороны должны делиться на 4.
    Возвращает ĉ (n, 3, h, w); выход псевдо-декодера отбрасывается.
    """
    m = _as_mri_batch(m)
    height, width = m.shape[-2:]
    if height % 4 or width % 4:
        raise ShapeError(f"стороны MRI должны делиться на 4, получено {height}x{width}")
    generator, _ = load_colorizer(checkpoint, device=device)
    with torch.no_grad():
        c_hat, _ = generator(m.to(device))
    return c_hat.cpu()


# --- Абляции ---

def run_ablation_suite(
    manifest: DatasetManifest,
    base_cfg: ExperimentConfig,
    out_dir,
    segmenter: UNet | None = None,
    names=tuple(ABLATIONS),
) -> AblationTable:
    """
    Обучает и оценивает полную модель и абляции A1..A5 с общим seed и датасетом.
    Упавшая строка попадает в errors и не прерывает остальные.
    """
    out_dir = Path(out_dir)
    needs_segmenter = any(base_cfg.with_ablation(name).train.ablation.uses_segmenter for name in names)
    if needs_segmenter and segmenter is None:
        segmenter, _ = pretrain_segmenter(manifest, base_cfg, out_dir=out_dir)

    rows, errors = {}, {}
    for name in names:
        cfg = base_cfg.with_ablation(name)
        try:
            result = train(
                manifest, cfg, out_dir / name,
                segmenter=segmenter if cfg.train.ablation.uses_segmenter else None,
            )
            if result.final_checkpoint is None:
                raise TrainingError("обучение остановлено до финального чекпоинта")
            rows[name] = evaluate(manifest, result.final_checkpoint, device=cfg.train.device)
        except (ColorizationError, RuntimeError, OSError) as e:
            logging.error("Абляция %s не выполнена: %s", name, e)
            rows[name], errors[name] = None, str(e)

    table = AblationTable(rows=rows, errors=errors, dataset_checksum=manifest.checksum)
    table.violations, table.warnings = check_ordering(rows)
    return table


def check_ordering(rows: dict) -> tuple[list[str], list[str]]:
    """
    Сравнивает SSIM абляций с полной моделью.
    Возвращает (violations, warnings): A1, A3, A5 с SSIM выше полной модели — нарушения,
    A2, A4 с SSIM не ниже полной модели — только предупреждения. Упавшие строки пропускаются.
    """
    full = rows.get("full")
    if full is None or full.aggregate["ssim"]["mean"] is None:
        return [], []
    full_ssim = full.aggregate["ssim"]["mean"]

    violations, warnings = [], []
    for name in DIRECTIONAL_ROWS + REPORT_ONLY_ROWS:
        report = rows.get(name)
        ablated = report.aggregate["ssim"]["mean"] if report is not None else None
        if ablated is None:
            continue
        if name in DIRECTIONAL_ROWS and ablated > full_ssim:
            message = f"{name}: SSIM {ablated:.4f} выше полной модели {full_ssim:.4f}"
            logging.error("Нарушен порядок абляций: %s", message)
            violations.append(message)
        elif name in REPORT_ONLY_ROWS and ablated >= full_ssim:
            message = f"{name}: SSIM {ablated:.4f} не ниже полной модели {full_ssim:.4f}"
            logging.warning(message)
            warnings.append(message)
    return violations, warnings


def load_state_config(checkpoint) -> ExperimentConfig:
    """Конфиг, с которым был записан чекпоинт обучения."""
    return config_from_checkpoint(load_checkpoint(checkpoint))
