# src/main.py
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from src.errors import ConfigError
from src.harness import list_algorithms, load_config, run_experiment, sweep

logger = logging.getLogger("Main")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_PARTIAL = 3

DEFAULT_CONFIG = "config/settings.yaml"


def setup_logging(level: str = "INFO", quiet: bool = False, log_file: Optional[Path] = None) -> None:
    """
    ログ設定。標準出力と（指定があれば）ファイルに出す。

    Args:
        level (str): ログレベル名
        quiet (bool): True なら WARNING 以上のみ
        log_file (Optional[Path]): ログファイルのパス
    """
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=logging.WARNING if quiet else getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decopt", description="Decentralized optimization experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=DEFAULT_CONFIG, help="experiment YAML")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, default=None, help="root seed (overrides seed)")
        p.add_argument("--quiet", action="store_true", help="only warnings and errors")

    run_p = sub.add_parser("run", help="run one experiment")
    common(run_p)

    sweep_p = sub.add_parser("sweep", help="sweep eps, kappa or chi and fit scaling slopes")
    common(sweep_p)
    sweep_p.add_argument("--variable", required=True, choices=["eps", "kappa", "chi"])
    sweep_p.add_argument("--values", required=True, type=float, nargs="+")
    sweep_p.add_argument("--workers", type=int, default=None, help="parallel sweep members")

    val_p = sub.add_parser("validate-config", help="validate a config without running")
    val_p.add_argument("--config", default=DEFAULT_CONFIG)
    val_p.add_argument("--quiet", action="store_true")

    list_p = sub.add_parser("list-algorithms", help="print the algorithm registry")
    list_p.add_argument("--quiet", action="store_true")
    return parser


def _load(args: argparse.Namespace):
    config = load_config(args.config)
    update = {}
    if getattr(args, "seed", None) is not None:
        update["seed"] = args.seed
    out_dir = getattr(args, "out", None) or os.getenv("DECOPT_OUT_DIR")
    if out_dir:
        update["output_dir"] = out_dir
    return config.model_copy(update=update) if update else config


def cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    result = run_experiment(config)
    if result.status == "DIVERGED":
        logger.error(f"Run diverged: {result.message}")
        return EXIT_DIVERGED
    if result.status == "ERROR":
        logger.error(f"Run failed: {result.message}")
        return EXIT_CONFIG
    logger.info(f"Summary written to {result.summary_path}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _load(args)
    workers = args.workers or int(os.getenv("DECOPT_WORKERS", "1"))
    report = sweep(config, args.variable, args.values, workers=workers)
    for fit in report.fits:
        logger.info(f"{fit.metric}: slope={fit.slope:.3f} theory={fit.theory_slope} passed={fit.passed}")
    if report.failures:
        for failure in report.failures:
            logger.warning(f"Sweep member failed: {failure}")
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    print(f"OK: {config.algorithm.id} on {config.problem.family}/{config.graph.family} (m={config.problem.m})")
    return EXIT_OK


def cmd_list(args: argparse.Namespace) -> int:
    for entry in list_algorithms():
        required = ", ".join(entry.required) or "-"
        print(f"{entry.id:<22} {entry.family:<10} required: {required:<20} {entry.description}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "validate-config": cmd_validate,
    "list-algorithms": cmd_list,
}


def main(argv: Optional[list[str]] = None) -> int:
    """
    CLI のエントリポイント。終了コード: 0 正常, 1 設定エラー, 2 発散, 3 スイープの一部失敗。
    """
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(os.getenv("DECOPT_LOG_LEVEL", "INFO"), quiet=args.quiet)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        fields = f" [{', '.join(e.fields)}]" if e.fields else ""
        logger.error(f"Config error: {e}{fields}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
