import argparse
import json
import sys
from typing import List, Optional

import config as env_config
import jsonlog
import runner

logger = jsonlog.setup_logger("app")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def _parse_values(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="divmin",
                                     description="Self-imitation and diverse-ensemble policy optimisation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a KEY=VALUE config file")
    run_p.add_argument("config", help="path to the config file")
    run_p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (repeatable)")

    sweep_p = sub.add_parser("sweep", help="run an ablation grid and write summary.csv")
    sweep_p.add_argument("config")
    sweep_p.add_argument("--axis", required=True, choices=sorted(runner.SWEEP_AXES))
    sweep_p.add_argument("--values", required=True, help="comma-separated axis values")
    sweep_p.add_argument("--seeds", required=True, help="comma-separated seeds")
    sweep_p.add_argument("--workers", type=int, default=1, help="parallel cells (processes)")
    sweep_p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    eval_p = sub.add_parser("eval", help="evaluate a stored policy")
    eval_p.add_argument("checkpoint", help="checkpoint.divmin or its run directory")
    eval_p.add_argument("--episodes", type=int, default=10)
    eval_p.add_argument("--seed", type=int, default=0)

    heat_p = sub.add_parser("export-heatmap", help="re-roll the stored policy and write heatmap.csv")
    heat_p.add_argument("run_dir")
    heat_p.add_argument("--episodes", type=int, default=10)
    heat_p.add_argument("--seed", type=int, default=0)

    kern_p = sub.add_parser("export-kernel", help="summarise kernel_###.csv files into kernel_summary.csv")
    kern_p.add_argument("run_dir")
    return parser


def _report_config_error(e: env_config.ConfigError) -> int:
    for problem in e.problems:
        print(f"config error: {problem}", file=sys.stderr)
    logger.error(f"Invalid configuration: {e}", extra={'field': e.field, 'line': e.line})
    return EXIT_CONFIG


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = env_config.Config(args.config, overrides=args.overrides)
            return runner.run(runner.ExperimentConfig.from_config(cfg))

        if args.command == "sweep":
            cfg = env_config.Config(args.config, overrides=args.overrides)
            runner.ExperimentConfig.from_config(cfg)
            seeds = [int(s) for s in _parse_values(args.seeds)]
            summary = runner.sweep(cfg, args.axis, _parse_values(args.values), seeds, workers=args.workers)
            if summary is None:
                return EXIT_FAILED
            print(summary)
            return EXIT_OK

        if args.command == "eval":
            report = runner.eval_checkpoint(args.checkpoint, episodes=args.episodes, seed=args.seed)
            if report is None:
                return EXIT_FAILED
            print(json.dumps(report))
            return EXIT_OK

        if args.command == "export-heatmap":
            path = runner.export_heatmap(args.run_dir, episodes=args.episodes, seed=args.seed)
        else:
            path = runner.export_kernel(args.run_dir)
        if path is None:
            return EXIT_FAILED
        print(path)
        return EXIT_OK
    except env_config.ConfigError as e:
        return _report_config_error(e)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
