"""
eval — метрики на тестовой выборке: report.json, metrics.txt, report.html, grid.png.
"""

# --- Стандартные библиотеки ---
from pathlib import Path

# --- Сторонние библиотеки ---
import torch

# --- Модули проекта ---
from app.colorization.experiment import load_colorizer
from app.colorization.metrics import evaluate
from app.colorization.phantom import load_manifest, load_triplet
from app.colorization.training import load_state_config
from app.commands.common import replay_args, resolve_checkpoint
from app.core.config import DATA_DIR, DEVICE, RUNS_DIR
from app.core.helpers import write_json
from app.core.lifespan import lifespan
from app.web.report import emit_comparison_grid, render_html_report, render_metric_table, write_text

NAME = "eval"


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="оценить чекпоинт на тестовой выборке")
    parser.add_argument("--ckpt", required=True, help="чекпоинт, каталог запуска или 'final'")
    parser.add_argument("--data", default=DATA_DIR, help="каталог датасета с manifest.json")
    parser.add_argument("--out", default=str(Path(RUNS_DIR) / "eval"), help="каталог отчёта")
    parser.add_argument("--split", default="test", choices=("train", "test"))
    parser.add_argument("--grid", type=int, default=3, help="число образцов в сетке сравнения")
    parser.add_argument("--device", default=DEVICE)
    parser.add_argument("-v", "--verbose", action="store_true", help="логирование DEBUG")
    parser.set_defaults(handler=run)


def run(args) -> int:
    checkpoint = resolve_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    cfg = load_state_config(checkpoint)
    with lifespan(
        NAME, args.out, cfg, verbose=args.verbose, seed=cfg.train.seed, args=replay_args(args),
    ) as run_ctx:
        report = evaluate(manifest, checkpoint, split=args.split, device=args.device)
        write_json(run_ctx.out_dir / "report.json", report.to_document())

        table = render_metric_table({"Ours": report.aggregate})
        write_text(run_ctx.out_dir / "metrics.txt", table)
        print(table)

        grid_name = None
        count = min(args.grid, manifest.split_size(args.split))
        if count > 0:
            generator, _ = load_colorizer(checkpoint, device=args.device)
            samples = [load_triplet(manifest, args.split, i) for i in range(count)]
            with torch.no_grad():
                outputs = [generator(torch.from_numpy(s.m)[None].to(args.device))[0][0].cpu() for s in samples]
            grid_name = "grid.png"
            emit_comparison_grid(samples, outputs, run_ctx.out_dir / grid_name)

        html = render_html_report("Оценка колоризации", {"Ours": report.aggregate}, report.metadata, grid_name)
        write_text(run_ctx.out_dir / "report.html", html)
    return 0
