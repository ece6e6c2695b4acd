import argparse
import logging
import sys
from typing import List, Optional

from .config import settings
from .exceptions import WorkbenchError
from .services.bench_service import cmd_bench, cmd_decomp, cmd_replay, cmd_train
from .telemetry import init_telemetry

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment file of 'key = value' lines")
    common.add_argument("--out", default=None, help=f"output directory (default: config output_dir or "
                                                    f"{settings.OUTPUT_DIR})")
    common.add_argument("--seed-offset", type=int, default=0, help="added to every configured seed")
    common.add_argument("--threads", type=int, default=None,
                        help=f"parallel episodes / sweep cells (default {settings.DEFAULT_THREADS})")

    parser = argparse.ArgumentParser(prog="sncbf-bench", description=settings.PROJECT_NAME)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="collect demonstrations, fit dynamics, train barriers")
    bench = sub.add_parser("bench", parents=[common], help="collision-rate sweep over methods and densities")
    bench.add_argument("--models", default=None, help="model container directory (default: <out>/models)")
    sub.add_parser("decomp", parents=[common], help="predictor generalization across crowd densities")
    replay = sub.add_parser("replay", parents=[common], help="barrier level sets over a recorded trajectory")
    replay.add_argument("trajectory", help="trajectory CSV written by 'bench'")
    replay.add_argument("model", help="barrier model container")
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == "train":
        artifacts = cmd_train(args.config, args.out, args.threads, args.seed_offset)
        for line in artifacts.summaries:
            print(line)
        print(f"models: {', '.join(str(p) for p in [artifacts.dynamics, *artifacts.members])}")
    elif args.command == "bench":
        table = cmd_bench(args.config, args.models, args.out, args.threads, args.seed_offset)
        for row in table.rows:
            print(f"{row.dynamics:<18} {row.method:<15} {row.obstacles:>4} seed {row.seed:<3} "
                  f"collision rate {row.collision_rate:6.1%}  frozen {row.frozen_fraction:6.1%}")
    elif args.command == "decomp":
        report = cmd_decomp(args.config, args.out, args.threads, args.seed_offset)
        for row in report.rows:
            print(f"{row.kind.value:<5} {row.density:>4} seed {row.seed:<3} L2 {row.mean_l2:.4f} "
                  f"max {row.mean_maxnorm:.4f} eps {row.eps95:.4f}")
    elif args.command == "replay":
        for path in cmd_replay(args.config, args.trajectory, args.model, args.out):
            print(path)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    init_telemetry()
    try:
        return run(args)
    except WorkbenchError as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, FileNotFoundError) as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
