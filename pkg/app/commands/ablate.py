"""
ablate — полная модель и абляции A1..A5: обучение, оценка, сводная таблица.
"""

# --- Стандартные библиотеки ---
import logging                          # Отслеживание работы/диагностика проблем
from pathlib import Path

# --- Модули проекта ---
from app.colorization.experiment import ABLATIONS
from app.colorization.phantom import load_manifest
from app.colorization.training import load_segmenter, run_ablation_suite
from app.commands.common import add_config_args, load_experiment, replay_args
from app.core.config import DATA_DIR, RUNS_DIR
from app.core.helpers import write_json
from app.core.lifespan import lifespan
from app.web.report import render_html_report, render_metric_table, write_text

NAME = "ablate"


def register(subparsers):
    parser = subparsers.add_parser(NAME, help="таблица абляций (Ours, A1..A5)")
    add_config_args(parser)
    parser.add_argument("--data", default=DATA_DIR, help="каталог датасета с manifest.json")
    parser.add_argument("--out", default=str(Path(RUNS_DIR) / "ablation"), help="каталог результатов")
    parser.add_argument("--segmenter", help="готовый чекпоинт сегментатора (иначе предобучается)")
    parser.add_argument("--only", nargs="+", choices=tuple(ABLATIONS), help="подмножество строк")
    parser.set_defaults(handler=run)


def run(args) -> int:
    cfg = load_experiment(args)
    manifest = load_manifest(args.data)
    with lifespan(
        NAME, args.out, cfg, verbose=args.verbose, seed=cfg.train.seed, args=replay_args(args),
    ) as run_ctx:
        segmenter = None
        if args.segmenter:
            segmenter = load_segmenter(args.segmenter, cfg, manifest.spec.num_classes, device=cfg.train.device)
        table = run_ablation_suite(
            manifest, cfg, run_ctx.out_dir, segmenter=segmenter, names=tuple(args.only or ABLATIONS),
        )

        write_json(run_ctx.out_dir / "ablation.json", {
            "dataset_checksum": table.dataset_checksum,
            "rows": {
                table.label(name): (report.to_document() if report is not None else None)
                for name, report in table.rows.items()
            },
            "errors": table.errors,
            "warnings": table.warnings,
            "violations": table.violations,
        })
        text = render_metric_table(table.aggregates())
        write_text(run_ctx.out_dir / "ablation.txt", text)
        print(text)
        html = render_html_report(
            "Абляции", table.aggregates(), {"dataset_checksum": table.dataset_checksum}, errors=table.errors,
        )
        write_text(run_ctx.out_dir / "ablation.html", html)
    if table.violations:
        logging.error("Порядок абляций нарушен: %s", "; ".join(table.violations))
        return 2
    return 0
