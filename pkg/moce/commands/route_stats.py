import argparse

from ..services.evaluation_service import route_stats


def register(subparsers) -> None:
    parser = subparsers.add_parser("route-stats", help="Cluster histograms and expert load fractions")
    parser.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    parser.add_argument("--data", required=True, help="Line-delimited JSON instruction records")
    parser.add_argument("--clustering", default=None, help="Clustering model replacing the checkpoint's")
    parser.add_argument("--embeddings", default=None, help="Embedding file for file-embedded checkpoints")
    parser.add_argument("--output", required=True, help="Directory for the CSV and JSON reports")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    report = route_stats(args.checkpoint, args.data, args.clustering, args.embeddings, args.output)
    print(" ".join(f"{group}:{count}" for group, count in enumerate(report.histogram)))
    return 0
