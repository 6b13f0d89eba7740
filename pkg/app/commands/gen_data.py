"""
gen-data — генерация синтетического датасета фантомов.
"""

# --- Стандартные библиотеки ---
import logging                          # Отслеживание работы/диагностика проблем

# --- Модули проекта ---
from app.colorization.phantom import generate_dataset
from app.commands.common import add_config_args, load_experiment, replay_args
from app.core.config import DATA_DIR
from app.core.lifespan import lifespan

NAME = "gen-data"


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="сгенерировать датасет фантомов и манифест")
    add_config_args(parser)
    parser.add_argument("--out", default=DATA_DIR, help="каталог датасета")
    parser.add_argument("--workers", type=int, help="число потоков генерации (по умолчанию dataset.workers)")
    parser.set_defaults(handler=run)


def run(args) -> int:
    cfg = load_experiment(args)
    with lifespan(
        NAME, args.out, cfg, verbose=args.verbose, seed=cfg.phantom.seed, args=replay_args(args),
    ):
        manifest = generate_dataset(
            cfg.phantom, cfg.dataset.n_train, cfg.dataset.n_test, args.out,
            workers=args.workers or cfg.dataset.workers,
        )
        logging.info("Контрольная сумма датасета: %s", manifest.checksum)
    return 0
