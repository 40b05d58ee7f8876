import argparse
import logging
import sys

from transfer import experiment
from transfer.train import Regime
from utils.errors import Sim2RealError
from utils.logging_setup import configure_logging

logger = logging.getLogger("ExperimentApp")

DEFAULT_CONFIG = "configs/desk.cfg"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG, help="flat 'section.key = value' config file")
    common.add_argument("--seed", type=int, default=None, help="override experiment.seed")
    common.add_argument("--out", default=None, help="override experiment.output_dir")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("--quiet", action="store_true", help="warnings and errors only")

    parser = argparse.ArgumentParser(
        description="Synthetic sim-to-real transfer experiments for a cap-on-bottle distance controller",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_gen = sub.add_parser("generate", parents=[common], help="generate source, paired and test datasets")
    p_gen.add_argument("--dump-pgm", type=int, default=0, metavar="N",
                       help="also write the first N images of each dataset as 16-bit PGM (millimeters)")

    p_train = sub.add_parser("train", parents=[common], help="train one regime")
    p_train.add_argument("--regime", required=True, choices=[r.value for r in Regime])

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a trained regime")
    p_eval.add_argument("--regime", required=True, choices=[r.value for r in Regime])
    p_eval.add_argument("--checkpoint", default=None, help="checkpoint path (default: the regime's own)")

    p_report = sub.add_parser("report", parents=[common], help="summarize evaluated rows")
    p_report.add_argument("--charts", action="store_true", help="also write plotly HTML bar charts")

    sub.add_parser("oracle-eval", parents=[common], help="evaluate the ground-truth distance controller")

    p_pipe = sub.add_parser("pipeline", parents=[common], help="generate, train, eval and report")
    p_pipe.add_argument("--seeds", type=int, nargs="+", default=None, help="master seeds (default: config seed)")
    p_pipe.add_argument("--charts", action="store_true")

    p_abl = sub.add_parser("ablation", parents=[common], help="clutter pairing ablation")
    p_abl.add_argument("--charts", action="store_true")
    return parser


def run(args) -> None:
    config = experiment.load_experiment_config(args.config, seed=args.seed, output_dir=args.out)
    if args.command == "generate":
        for name, path in experiment.cmd_generate(config, args.dump_pgm).items():
            logger.info("%s dataset: %s", name, path)
    elif args.command == "train":
        result = experiment.cmd_train(config, args.regime)
        logger.info("Checkpoint: %s", result["checkpoint"])
    elif args.command == "eval":
        row = experiment.cmd_eval(config, args.regime, args.checkpoint)
        logger.info("%s", row)
    elif args.command == "oracle-eval":
        row = experiment.cmd_oracle_eval(config)
        logger.info("%s", row)
    elif args.command == "report":
        rows = experiment.collect_rows(config.output_dir)
        experiment.cmd_report(rows, config.output_dir, args.charts)
    elif args.command == "pipeline":
        experiment.pipeline(config, args.seeds, args.charts)
    elif args.command == "ablation":
        experiment.ablation(config, args.charts)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(verbose=args.verbose, quiet=args.quiet)
    try:
        run(args)
    except Sim2RealError as e:
        logger.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
