"""
train — циклическое состязательное обучение колоризации.
"""

# --- Стандартные библиотеки ---
import logging                          # Отслеживание работы/диагностика проблем
from pathlib import Path

# --- Модули проекта ---
from app.colorization.phantom import load_manifest
from app.colorization.training import SEGMENTER_NAME, load_segmenter, train
from app.commands.common import add_config_args, load_experiment, replay_args
from app.core.config import DATA_DIR, RUNS_DIR
from app.core.lifespan import lifespan

NAME = "train"


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="обучить генераторы и дискриминаторы")
    add_config_args(parser)
    parser.add_argument("--data", default=DATA_DIR, help="каталог датасета с manifest.json")
    parser.add_argument("--out", default=str(Path(RUNS_DIR) / "train"), help="каталог запуска")
    parser.add_argument(
        "--segmenter", default=str(Path(RUNS_DIR) / "segmenter" / SEGMENTER_NAME),
        help="чекпоинт предобученного сегментатора (не нужен для A2/A3)",
    )
    parser.add_argument("--no-resume", action="store_true", help="не продолжать с последнего чекпоинта")
    parser.add_argument("--max-steps", type=int, help="остановиться после шага N (с чекпоинтом)")
    parser.set_defaults(handler=run)


def run(args) -> int:
    cfg = load_experiment(args)
    manifest = load_manifest(args.data)
    with lifespan(
        NAME, args.out, cfg, verbose=args.verbose, seed=cfg.train.seed, args=replay_args(args),
    ) as run_ctx:
        segmenter = None
        if cfg.train.ablation.uses_segmenter:
            segmenter = load_segmenter(args.segmenter, cfg, manifest.spec.num_classes, device=cfg.train.device)
        result = train(
            manifest, cfg, run_ctx.out_dir, segmenter=segmenter,
            resume=not args.no_resume, max_steps=args.max_steps,
        )
    if result.final_checkpoint is None and args.max_steps is None:
        logging.error("Обучение остановлено до финального чекпоинта")
        return 2
    return 0
