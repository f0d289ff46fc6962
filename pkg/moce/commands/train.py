import argparse

from ..schemas.config import RunConfig
from ..services.training_service import pipeline_train


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="Embed, cluster, upcycle and train from a config file")
    parser.add_argument("--config", required=True, help="Flat key = value run configuration")
    parser.add_argument("--output-dir", default=None, help="Overrides output_dir from the config")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config)
    if args.output_dir:
        config = RunConfig.from_mapping({**config.model_dump(), "output_dir": args.output_dir})
    result = pipeline_train(config)
    print(f"checkpoint={result.checkpoint_dir} final_loss={result.report.final_loss}")
    return 0
