"""
phantom.py — синтетические частично совмещённые тройки (MRI, Cryosection, сегментация).

Фантом — набор эллиптических «органов» разных классов. Cryosection рисуется
палитрой классов с лёгкой текстурой, сегментация — точная карта меток,
MRI — таблица интенсивностей классов, сдвинутая гладким полем деформаций, плюс шум.
Амплитуда деформации задаёт, насколько «частично» совмещены MRI и Cryosection.

Формат на диске:
    <root>/manifest.json
    <root>/{train,test}/<i>_m.png     8-бит grayscale
    <root>/{train,test}/<i>_c.png     8-бит RGB
    <root>/{train,test}/<i>_s.png     8-бит метки классов 0..l-1
    <root>/{train,test}/<i>_warp.f32  поле деформации: заголовок b"WARP" + uint32 (версия,
                                      каналы, высота, ширина), далее float32, little-endian
"""

from __future__ import annotations

# --- Стандартные библиотеки ---
import colorsys                                     # Палитра классов по умолчанию
import logging                                      # Отслеживание работы/диагностика проблем
import struct                                       # Заголовок бинарного поля деформации
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

# --- Сторонние библиотеки ---
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image                               # Чтение/запись PNG
from scipy import ndimage                           # Сглаживание текстуры и варп MRI
from torch.utils.data import Dataset

# --- Модули проекта ---
from app.core.config import MANIFEST_VERSION, from_dict, to_dict
from app.core.errors import ConfigError, DatasetError, ShapeError
from app.core.helpers import read_json, sha256_files, write_json

SPLITS      = ("train", "test")
WARP_MAGIC  = b"WARP"
WARP_HEADER = struct.Struct("<4sIIII")              # magic, версия, каналы, высота, ширина


@dataclass(frozen=True)
class PhantomSpec:
    """Параметры генератора фантомов. palette/mri_intensity = None -> таблицы по умолчанию."""

    image_size: int = 256
    num_classes: int = 8                            # l, вместе с фоном (55 для полноразмерного атласа)
    organ_count_range: tuple[int, int] = (4, 9)
    palette: tuple[tuple[float, float, float], ...] | None = None
    mri_intensity: tuple[float, ...] | None = None
    noise_sigma: float = 0.02
    deformation_amplitude: float = 3.0              # макс. смещение MRI в пикселях
    texture_sigma: float = 0.03                     # лёгкая текстура Cryosection
    seed: int = 0

    def resolved_palette(self) -> np.ndarray:
        if self.palette is not None:
            return np.asarray(self.palette, dtype=np.float64)
        return default_palette(self.num_classes)

    def resolved_intensity(self) -> np.ndarray:
        if self.mri_intensity is not None:
            return np.asarray(self.mri_intensity, dtype=np.float64)
        return default_intensity(self.num_classes)

    def validate(self) -> None:
        """Проверяет параметры фантома, иначе ConfigError."""
        size = self.image_size
        if size < 16 or size & (size - 1):
            raise ConfigError(f"image_size должен быть степенью двойки >= 16, получено {size}")
        if not 1 <= self.num_classes <= 256:
            raise ConfigError(f"num_classes вне диапазона 1..256: {self.num_classes}")
        low, high = self.organ_count_range
        if low < 0 or high < low:
            raise ConfigError(f"некорректный organ_count_range: {self.organ_count_range}")
        if not 0.0 <= self.noise_sigma <= 0.2:
            raise ConfigError(f"noise_sigma должен быть в [0, 0.2], получено {self.noise_sigma}")
        if self.deformation_amplitude < 0:
            raise ConfigError(f"deformation_amplitude < 0: {self.deformation_amplitude}")
        if self.texture_sigma < 0:
            raise ConfigError(f"texture_sigma < 0: {self.texture_sigma}")

        palette = self.resolved_palette()
        if palette.shape != (self.num_classes, 3):
            raise ConfigError(
                f"в палитре {len(palette)} цветов, а классов {self.num_classes}"
            )
        if palette.min() < 0 or palette.max() > 1:
            raise ConfigError("цвета палитры должны лежать в [0, 1]")
        if len({tuple(np.round(color * 255).astype(int)) for color in palette}) != self.num_classes:
            raise ConfigError("у разных классов должны быть разные цвета палитры")

        intensity = self.resolved_intensity()
        if intensity.shape != (self.num_classes,):
            raise ConfigError(
                f"в таблице интенсивностей MRI {len(intensity)} значений, а классов {self.num_classes}"
            )
        if intensity.min() < 0 or intensity.max() > 1:
            raise ConfigError("интенсивности MRI должны лежать в [0, 1]")


def default_palette(num_classes: int) -> np.ndarray:
    """Фон почти чёрный, органы — оттенки с шагом золотого сечения."""
    colors = [(0.04, 0.03, 0.03)]
    for k in range(1, num_classes):
        hue        = (0.07 + 0.618034 * k) % 1.0
        saturation = 0.55 + 0.25 * ((k * 7) % 5) / 4
        value      = 0.55 + 0.35 * ((k * 3) % 4) / 3
        colors.append(colorsys.hsv_to_rgb(hue, saturation, value))
    return np.asarray(colors[:num_classes], dtype=np.float64)


def default_intensity(num_classes: int) -> np.ndarray:
    """Фон тёмный, органы — равномерно по [0.2, 0.95] в фиксированном перемешанном порядке."""
    table = np.empty(num_classes, dtype=np.float64)
    table[0] = 0.02
    if num_classes > 1:
        organs = np.linspace(0.2, 0.95, num_classes - 1)
        table[1:] = organs[np.random.default_rng(num_classes).permutation(num_classes - 1)]
    return table


@dataclass
class TripletSample:
    """Тройка срезов; все массивы channel-first, float32."""

    m: np.ndarray                       # (1, h, w) MRI в [0, 1]
    c: np.ndarray                       # (3, h, w) Cryosection в [0, 1]
    s: np.ndarray                       # (l, h, w) one-hot сегментация
    deformation_field: np.ndarray       # (2, h, w) смещения (dy, dx) в пикселях

    @property
    def labels(self) -> np.ndarray:
        return self.s.argmax(axis=0).astype(np.uint8)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Карта меток (h, w) -> one-hot (l, h, w)."""
    return np.eye(num_classes, dtype=np.float32)[labels].transpose(2, 0, 1).copy()


def render_intensity(spec: PhantomSpec, labels: np.ndarray) -> np.ndarray:
    """MRI без деформации и шума: интенсивность класса в каждом пикселе, (1, h, w)."""
    return spec.resolved_intensity()[labels].astype(np.float32)[None]


def _draw_organs(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    size   = spec.image_size
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    labels = np.zeros((size, size), dtype=np.uint8)

    low, high = spec.organ_count_range
    for _ in range(int(rng.integers(low, high + 1))):
        cls    = 0 if spec.num_classes == 1 else int(rng.integers(1, spec.num_classes))
        cy, cx = rng.uniform(-0.6, 0.6, size=2)
        ry, rx = rng.uniform(0.12, 0.45, size=2)
        angle  = rng.uniform(0.0, np.pi)
        u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
        labels[(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] = cls
    return labels


def _draw_deformation(rng: np.random.Generator, size: int, terms: int = 3) -> np.ndarray:
    """Гладкое поле смещений (2, h, w) из смеси низкочастотных синусоид, max|поле| = 1."""
    grid   = np.arange(size) / size
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    field_ = np.zeros((2, size, size), dtype=np.float64)
    for component in range(2):
        for _ in range(terms):
            amp    = rng.uniform(0.5, 1.0)
            fy, fx = rng.uniform(0.5, 2.0, size=2)
            phase  = rng.uniform(0.0, 2 * np.pi)
            field_[component] += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return field_ / max(np.abs(field_).max(), 1e-12)


def warp(image: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    """Билинейный варп изображения (h, w) полем (2, h, w): out(y, x) = image(y + dy, x + dx)."""
    size_y, size_x = image.shape
    yy, xx = np.meshgrid(np.arange(size_y), np.arange(size_x), indexing="ij")
    coords = np.stack([yy + displacement[0], xx + displacement[1]])
    return ndimage.map_coordinates(image, coords, order=1, mode="nearest")


def generate_phantom(spec: PhantomSpec, index: int) -> TripletSample:
    """
    Детерминированно строит тройку по (spec, index).
    Порядок выборок из ГСЧ не зависит от амплитуды и шума, поэтому при фиксированном
    seed меняется только величина рассогласования MRI и Cryosection.
    """
    spec.validate()
    if index < 0:
        raise ConfigError(f"index должен быть >= 0, получено {index}")

    rng    = np.random.default_rng([spec.seed, index])
    size   = spec.image_size
    labels = _draw_organs(spec, rng)

    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.5)
    texture = texture / (texture.std() + 1e-12) * spec.texture_sigma
    displacement = _draw_deformation(rng, size) * spec.deformation_amplitude
    noise = rng.standard_normal((size, size))

    c = np.clip(spec.resolved_palette()[labels] + texture[..., None], 0.0, 1.0)
    render = render_intensity(spec, labels)[0]
    m = render if spec.deformation_amplitude == 0 else warp(render.astype(np.float64), displacement)
    m = np.clip(m + spec.noise_sigma * noise, 0.0, 1.0) if spec.noise_sigma > 0 else m

    return TripletSample(
        m=np.asarray(m, dtype=np.float32)[None],
        c=c.transpose(2, 0, 1).astype(np.float32),
        s=one_hot(labels, spec.num_classes),
        deformation_field=displacement.astype(np.float32),
    )


# --- Формат на диске ---

def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def write_warp(path, displacement: np.ndarray) -> None:
    """Сохраняет поле (ch, h, w) в бинарный формат WARP (little-endian float32)."""
    channels, height, width = displacement.shape
    with open(path, "wb") as f:
        f.write(WARP_HEADER.pack(WARP_MAGIC, 1, channels, height, width))
        f.write(np.ascontiguousarray(displacement, dtype="<f4").tobytes())


def read_warp(path) -> np.ndarray:
    """Читает поле деформации формата WARP."""
    raw = Path(path).read_bytes()
    if len(raw) < WARP_HEADER.size:
        raise DatasetError("обрезанный заголовок поля деформации", path)
    magic, _version, channels, height, width = WARP_HEADER.unpack_from(raw)
    body = raw[WARP_HEADER.size:]
    if magic != WARP_MAGIC or len(body) != channels * height * width * 4:
        raise DatasetError("повреждённое поле деформации", path)
    return np.frombuffer(body, dtype="<f4").reshape(channels, height, width).astype(np.float32)


def save_triplet(sample: TripletSample, directory, stem: str) -> dict:
    """Пишет тройку в каталог; возвращает имена файлов относительно каталога сплита."""
    directory = Path(directory)
    names = {
        "m": f"{stem}_m.png",
        "c": f"{stem}_c.png",
        "s": f"{stem}_s.png",
        "warp": f"{stem}_warp.f32",
    }
    path = directory / names["m"]
    try:
        Image.fromarray(_to_uint8(sample.m[0])).save(path)
        path = directory / names["c"]
        Image.fromarray(_to_uint8(sample.c.transpose(1, 2, 0))).save(path)
        path = directory / names["s"]
        Image.fromarray(sample.labels).save(path)
        path = directory / names["warp"]
        write_warp(path, sample.deformation_field)
    except OSError as e:
        logging.error("Ошибка записи тройки: %s", e)
        raise DatasetError(f"не удалось записать файл ({e})", path) from e
    return names


@dataclass
class DatasetManifest:
    """Описание датасета на диске."""

    root: str
    spec: PhantomSpec
    n_train: int
    n_test: int
    samples: dict = field(default_factory=dict)   # split -> [{"m": .., "c": .., "s": .., "warp": ..}]
    checksum: str = ""
    format_version: int = MANIFEST_VERSION

    def split_size(self, split: str) -> int:
        if split not in SPLITS:
            raise DatasetError(f"неизвестный сплит {split!r}")
        return len(self.samples.get(split, []))

    def sample_path(self, split: str, i: int, kind: str) -> Path:
        return Path(self.root) / split / self.samples[split][i][kind]

    def to_document(self) -> dict:
        return {
            "root": self.root,
            "spec": to_dict(self.spec),
            "n_train": self.n_train,
            "n_test": self.n_test,
            "samples": self.samples,
            "checksum": self.checksum,
            "format_version": self.format_version,
        }


def load_manifest(root) -> DatasetManifest:
    """Читает <root>/manifest.json и проверяет, что все перечисленные файлы на месте."""
    root = Path(root)
    try:
        document = read_json(root / "manifest.json")
    except (OSError, ValueError) as e:
        raise DatasetError(f"повреждённый манифест ({e})", root / "manifest.json") from e
    if document is None:
        raise DatasetError("манифест не найден", root / "manifest.json")
    if document.get("format_version") != MANIFEST_VERSION:
        raise DatasetError(f"версия манифеста {document.get('format_version')} не поддерживается", root)

    try:
        manifest = DatasetManifest(
            root=str(root),
            spec=from_dict(PhantomSpec, document["spec"]),
            n_train=document["n_train"],
            n_test=document["n_test"],
            samples=document["samples"],
            checksum=document.get("checksum", ""),
        )
        for split in SPLITS:
            manifest.split_size(split)
    except (AttributeError, KeyError, TypeError, ConfigError) as e:
        raise DatasetError(f"повреждённый манифест ({e!r})", root / "manifest.json") from e
    for split in SPLITS:
        for i in range(manifest.split_size(split)):
            for kind in ("m", "c", "s"):
                if not manifest.sample_path(split, i, kind).exists():
                    raise DatasetError("файл из манифеста отсутствует", manifest.sample_path(split, i, kind))
    return manifest


def generate_dataset(spec: PhantomSpec, n_train: int, n_test: int, root, workers: int = 1) -> DatasetManifest:
    """
    Генерирует n_train + n_test троек и манифест.
    Индексы фантомов сквозные: train = 0..n_train-1, test = n_train..n_train+n_test-1,
    так что сплиты не пересекаются по образцам.
    """
    spec.validate()
    if n_train <= 0 or n_test <= 0:
        raise ConfigError(f"размеры сплитов должны быть > 0: train={n_train}, test={n_test}")

    root = Path(root)
    jobs = [("train", i, i) for i in range(n_train)] + [("test", i, n_train + i) for i in range(n_test)]
    for split in SPLITS:
        try:
            (root / split).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DatasetError(f"не удалось создать каталог ({e})", root / split) from e

    def _job(job):
        split, i, index = job
        return save_triplet(generate_phantom(spec, index), root / split, str(i))

    # порядок результатов совпадает с порядком jobs при любом числе воркеров
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            names = list(pool.map(_job, jobs))
    else:
        names = [_job(job) for job in jobs]

    samples = {"train": names[:n_train], "test": names[n_train:]}
    files = [root / split / entry[kind] for split in SPLITS for entry in samples[split] for kind in ("m", "c", "s", "warp")]
    manifest = DatasetManifest(
        root=str(root), spec=spec, n_train=n_train, n_test=n_test,
        samples=samples, checksum=sha256_files(files),
    )
    try:
        write_json(root / "manifest.json", manifest.to_document())
    except OSError as e:
        raise DatasetError(f"не удалось записать манифест ({e})", root / "manifest.json") from e

    logging.info("Датасет создан: %s (train=%s, test=%s)", root, n_train, n_test)
    return manifest


def _read_png(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as image:
            if image.mode != mode:
                raise DatasetError(f"ожидался PNG в режиме {mode}, получен {image.mode}", path)
            return np.asarray(image)
    except OSError as e:
        raise DatasetError(f"не удалось прочитать PNG ({e})", path) from e


def load_triplet(manifest: DatasetManifest, split: str, i: int) -> TripletSample:
    """Читает тройку; one-hot сегментации восстанавливается из карты меток точно."""
    size = manifest.split_size(split)
    if not 0 <= i < size:
        raise DatasetError(f"индекс {i} вне сплита {split} (размер {size})")

    num_classes = manifest.spec.num_classes
    labels_path = manifest.sample_path(split, i, "s")
    m = _read_png(manifest.sample_path(split, i, "m"), "L")
    c = _read_png(manifest.sample_path(split, i, "c"), "RGB")
    labels = _read_png(labels_path, "L")
    if labels.max(initial=0) >= num_classes:
        raise DatasetError(f"метка {int(labels.max())} >= числа классов {num_classes}", labels_path)
    if not (m.shape == labels.shape == c.shape[:2]):
        raise DatasetError("размеры файлов тройки не совпадают", labels_path)

    warp_name = manifest.samples[split][i].get("warp")
    warp_path = Path(manifest.root) / split / warp_name if warp_name else None
    if warp_path is not None and warp_path.exists():
        displacement = read_warp(warp_path)
    else:
        displacement = np.zeros((2, *labels.shape), dtype=np.float32)

    return TripletSample(
        m=(m.astype(np.float32) / 255.0)[None],
        c=c.astype(np.float32).transpose(2, 0, 1) / 255.0,
        s=one_hot(labels, num_classes),
        deformation_field=displacement,
    )


class PhantomDataset(Dataset):
    """torch-обёртка над сплитом манифеста; limit ограничивает число пар (режим 46 сегментаций)."""

    def __init__(self, manifest: DatasetManifest, split: str, limit: int | None = None):
        self.manifest = manifest
        self.split    = split
        size = manifest.split_size(split)
        self.size = size if limit is None else min(size, limit)

    def __len__(self):
        return self.size

    def __getitem__(self, i):
        sample = load_triplet(self.manifest, self.split, i)
        return {
            "m": torch.from_numpy(sample.m),
            "c": torch.from_numpy(sample.c),
            "s": torch.from_numpy(sample.s),
            "index": i,
        }


def downsample(img: torch.Tensor, factor: int) -> torch.Tensor:
    """Усредняющий пулинг factor x factor; каналы сохраняются."""
    if img.dim() != 4:
        raise ShapeError(f"ожидается тензор (n, ch, h, w), получено {tuple(img.shape)}")
    height, width = img.shape[-2:]
    if factor < 1 or height % factor or width % factor:
        raise ShapeError(f"размер {height}x{width} не делится на {factor}")
    return F.avg_pool2d(img, factor) if factor > 1 else img
