import argparse

from ..services.evaluation_service import pipeline_eval


def register(subparsers) -> None:
    parser = subparsers.add_parser("eval", help="Perplexity and exact match on held-out records")
    parser.add_argument("--checkpoint", required=True, help="Checkpoint directory")
    parser.add_argument("--data", required=True, help="Line-delimited JSON instruction records")
    parser.add_argument("--clustering", default=None, help="Clustering model replacing the checkpoint's")
    parser.add_argument("--embeddings", default=None, help="Embedding file for file-embedded checkpoints")
    parser.add_argument("--output", default=None, help="Directory for eval_metrics.json")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    report = pipeline_eval(args.checkpoint, args.data, args.clustering, args.embeddings, args.output)
    print(f"eval_loss={report.eval_loss} perplexity={report.perplexity} exact_match={report.exact_match}")
    return 0
