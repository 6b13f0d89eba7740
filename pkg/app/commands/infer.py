"""
infer — колоризация одной MRI из PNG.
"""

# --- Стандартные библиотеки ---
import logging                          # Отслеживание работы/диагностика проблем
from pathlib import Path

# --- Сторонние библиотеки ---
import numpy as np
from PIL import Image                   # Чтение/запись PNG

# --- Модули проекта ---
from app.colorization.training import infer, load_state_config
from app.commands.common import replay_args, resolve_checkpoint
from app.core.config import DEVICE
from app.core.errors import DatasetError
from app.core.helpers import atomic_write
from app.core.lifespan import lifespan

NAME = "infer"


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="колоризовать MRI-срез (PNG)")
    parser.add_argument("--ckpt", required=True, help="чекпоинт, каталог запуска или 'final'")
    parser.add_argument("--in", dest="input", required=True, help="входная MRI (PNG, grayscale)")
    parser.add_argument("--out", required=True, help="выходной PNG ĉ")
    parser.add_argument("--device", default=DEVICE)
    parser.add_argument("-v", "--verbose", action="store_true", help="логирование DEBUG")
    parser.set_defaults(handler=run)


def read_mri(path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            return np.asarray(image.convert("L"), dtype=np.float32) / 255.0
    except OSError as e:
        raise DatasetError(f"не удалось прочитать MRI ({e})", path) from e


def run(args) -> int:
    checkpoint = resolve_checkpoint(args.ckpt)
    out = Path(args.out)
    cfg = load_state_config(checkpoint)
    with lifespan(
        NAME, out.parent, cfg, verbose=args.verbose, seed=cfg.train.seed, args=replay_args(args),
    ):
        c_hat = infer(checkpoint, read_mri(args.input), device=args.device)[0].numpy()
        rgb = np.round(np.clip(c_hat, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
        atomic_write(out, lambda f: Image.fromarray(rgb).save(f, format="PNG"), mode="wb")
        logging.info("ĉ записан: %s", out)
    return 0
