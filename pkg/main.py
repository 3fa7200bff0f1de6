import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

from agents import AgentBackends, pure_rl, two_loop, variant_settings
from analytics import ablation_rows, format_table, write_ablation, write_curves
from backends import make_backend
from config import (
    ABLATION_VARIANTS,
    DEFAULT_OUTPUT_DIR,
    EXIT_BUDGET_EXHAUSTED,
    EXIT_CONFIG_ERROR,
    EXIT_ERROR,
    EXIT_INTERRUPTED,
    EXIT_SOLVED,
    LOG_FORMAT,
    LOG_LEVEL,
    RunConfig,
    load_run_config,
)
from errors import ConfigError, MinicraftError, RunInterrupted
from minicraft import MiniCraftEnv, load_game_data
from prompts import ContextBundle
from state import RunReport, RunStore
from task_planner import run_chain

logger = logging.getLogger("minicraft.main")


def configure_logging(log_file: Optional[Path] = None) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file is not None:
        handlers.insert(0, logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT, handlers=handlers, force=True)


def attach_log_file(log_file: Path) -> logging.Handler:
    handler = logging.FileHandler(log_file, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_log_file(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


def exit_code(report: RunReport) -> int:
    return EXIT_SOLVED if report.status == "solved" else EXIT_BUDGET_EXHAUSTED


# ---------------------- runs ---------------------- #
def _execute(cfg: RunConfig, store: RunStore, checkpoint: Optional[dict] = None) -> RunReport:
    """Drive one configured run into `store`; a chain config runs every planned subtask."""
    data = load_game_data()
    task = cfg.task_spec(data)
    backend = make_backend(cfg.backend)
    ctx = ContextBundle.from_env(MiniCraftEnv(data))

    if cfg.chain:
        if checkpoint is not None:
            raise ConfigError("chain runs cannot be resumed")
        reports: List[RunReport] = []

        def run_subtask(subtask):
            report = two_loop(subtask, ctx, AgentBackends.shared(backend), cfg.agents, cfg.ppo, cfg.reward,
                              cfg.seeds, data, store)
            reports.append(report)
            return report

        chain = run_chain(task, run_subtask, backend=backend, data=data)
        store.write_artifact("chain.json", json.dumps(chain.to_dict(), indent=2, sort_keys=True) + "\n")
        return RunReport(
            run_id=store.run_id,
            task=task.task_id,
            status="solved" if chain.status == "solved" else "budget-exhausted",
            final_success=min((r.final_success for r in reports), default=1.0),
            per_seed={},
            rounds=[round_ for r in reports for round_ in r.rounds],
            frames=chain.frames,
            wall_clock=sum(r.wall_clock for r in reports),
            dead_loop_ratio=max((r.dead_loop_ratio for r in reports), default=0.0),
            config=cfg.to_dict(),
        )

    report = two_loop(task, ctx, AgentBackends.shared(backend), cfg.agents, cfg.ppo, cfg.reward, cfg.seeds,
                      data, store, checkpoint=checkpoint)
    report.config = cfg.to_dict()
    return report


def _finish(store: RunStore, action) -> int:
    """Run `action` inside the store's lock and map the outcome to an exit code."""
    handler = attach_log_file(store.log_path)
    store.acquire_lock()
    try:
        report = action()
        store.save_report(report)
        print(report.summary())
        return exit_code(report)
    except RunInterrupted as e:
        logger.error("Run %s interrupted: %s (resume with: run --resume %s)", store.run_id, e, store.run_dir)
        print(f"interrupted; resume with: run --resume {store.run_dir}")
        return EXIT_INTERRUPTED
    finally:
        store.release_lock()
        detach_log_file(handler)


def cmd_run(config_path: Optional[str], resume: Optional[str] = None) -> int:
    if resume:
        store = RunStore.open(resume)
        report = store.load_report()
        if report is not None:
            print(report.summary())
            return exit_code(report)
        checkpoint = store.load_checkpoint()
        if checkpoint is None:
            raise ConfigError(f"{resume} has no checkpoint to resume from")
        cfg = RunConfig.from_dict(store.config())
        logger.info("Resuming run %s", store.run_id)
        return _finish(store, lambda: _execute(cfg, store, checkpoint))

    if not config_path:
        raise ConfigError("run needs a config file or --resume RUN_DIR")
    cfg = load_run_config(config_path)
    parent_existed = cfg.output_dir.exists()
    run_id = cfg.run_id or RunStore.default_run_id(cfg.task)
    store = RunStore.create(cfg.output_dir, run_id, cfg.to_dict())
    try:
        return _finish(store, lambda: _execute(cfg, store))
    except ConfigError:
        store.remove()
        if not parent_existed and cfg.output_dir.exists() and not any(cfg.output_dir.iterdir()):
            shutil.rmtree(cfg.output_dir, ignore_errors=True)
        raise


def cmd_ablate(config_path: str, out: Optional[str] = None) -> int:
    cfg = load_run_config(config_path)
    data = load_game_data()
    task = cfg.task_spec(data)
    variants = cfg.variants or list(ABLATION_VARIANTS)
    base_id = cfg.run_id or RunStore.default_run_id(cfg.task)
    results = {}
    for variant in variants:
        store = RunStore.create(cfg.output_dir, f"{base_id}-{variant}", {**cfg.to_dict(), "variant": variant})
        logger.info("Ablation variant %s -> %s", variant, store.run_dir)

        def action(variant=variant, store=store):
            if variant == "pure-rl":
                report = pure_rl(task, cfg.ppo, cfg.reward, cfg.seeds, data, store,
                                 success_threshold=cfg.agents.success_threshold)
            else:
                backend = make_backend(cfg.backend)
                ctx = ContextBundle.from_env(MiniCraftEnv(data))
                report = two_loop(task, ctx, AgentBackends.shared(backend), variant_settings(variant, cfg.agents),
                                  cfg.ppo, cfg.reward, cfg.seeds, data, store)
            report.variant = variant
            report.config = cfg.to_dict()
            results[variant] = [report]
            return report

        code = _finish(store, action)
        if code == EXIT_INTERRUPTED:
            return code
    rows = ablation_rows(results)
    paths = write_ablation(rows, Path(out) if out else cfg.output_dir / f"{base_id}-ablation")
    print(format_table(rows), end="")
    logger.info("Ablation table written to %s", paths["text"])
    return EXIT_SOLVED


def cmd_curves(runs: List[str], runs_dir: Optional[str] = None, out: Optional[str] = None) -> int:
    if not runs:
        return EXIT_SOLVED
    base = Path(runs_dir) if runs_dir else DEFAULT_OUTPUT_DIR
    run_dirs = []
    for run in runs:
        path = Path(run)
        if not path.is_dir():
            path = base / run
        if not path.is_dir():
            raise ConfigError(f"run not found: {run}")
        run_dirs.append(path)
    written = write_curves(run_dirs, Path(out) if out else base / "curves")
    for path in written:
        print(path)
    return EXIT_SOLVED


def cmd_validate_config(config_path: str) -> int:
    cfg = load_run_config(config_path)
    print(f"ok: task={cfg.task} seeds={cfg.seeds} backend={cfg.backend.kind} output={cfg.output_dir}")
    return EXIT_SOLVED


# ---------------------- entry ---------------------- #
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minicraft", description="Two-loop code-as-policy agents on a crafting gridworld")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the two-loop driver for one config")
    run.add_argument("config", nargs="?", help="run config JSON")
    run.add_argument("--resume", metavar="RUN_DIR", help="continue an interrupted run")

    ablate = sub.add_parser("ablate", help="run every ablation variant and write the comparison table")
    ablate.add_argument("config")
    ablate.add_argument("--out", help="directory for ablation.txt/.jsonl/.png")

    curves = sub.add_parser("curves", help="export learning curves of finished runs")
    curves.add_argument("runs", nargs="*", help="run directories or run ids")
    curves.add_argument("--runs-dir", help="where run ids are looked up")
    curves.add_argument("--out", help="output directory")

    validate = sub.add_parser("validate-config", help="check a run config without running it")
    validate.add_argument("config")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.resume)
        if args.command == "ablate":
            return cmd_ablate(args.config, args.out)
        if args.command == "curves":
            return cmd_curves(args.runs, args.runs_dir, args.out)
        return cmd_validate_config(args.config)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except MinicraftError as e:
        logger.exception("Run failed: %s", e)
        return EXIT_ERROR
    except Exception as e:
        logger.exception("Unhandled exception: %s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    configure_logging()
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Stopped by keyboard interrupt.")
        sys.exit(EXIT_INTERRUPTED)
