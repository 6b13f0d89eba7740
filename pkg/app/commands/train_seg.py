"""
train-seg — предобучение сегментатора Cryosection.
"""

# --- Стандартные библиотеки ---
from pathlib import Path

# --- Модули проекта ---
from app.colorization.phantom import load_manifest
from app.colorization.training import pretrain_segmenter
from app.commands.common import add_config_args, load_experiment, replay_args
from app.core.config import DATA_DIR, RUNS_DIR
from app.core.lifespan import lifespan

NAME = "train-seg"


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="предобучить U-Net сегментатор на парах (c, s)")
    add_config_args(parser)
    parser.add_argument("--data", default=DATA_DIR, help="каталог датасета с manifest.json")
    parser.add_argument("--out", default=str(Path(RUNS_DIR) / "segmenter"), help="каталог результатов")
    parser.add_argument("--no-resume", action="store_true", help="начать заново, игнорируя segmenter.pt")
    parser.set_defaults(handler=run)


def run(args) -> int:
    cfg = load_experiment(args)
    manifest = load_manifest(args.data)
    with lifespan(
        NAME, args.out, cfg, verbose=args.verbose, seed=cfg.train.seed, args=replay_args(args),
    ) as run_ctx:
        pretrain_segmenter(manifest, cfg, out_dir=run_ctx.out_dir, resume=not args.no_resume)
    return 0
