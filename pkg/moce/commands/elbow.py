import argparse

from ..config.moce_config import MODEL_PARAMETERS
from ..services.clustering_service import elbow_select
from ..services.embedding_service import load_embeddings
from ..utils.seeding import CLUSTERING, substream_seed


def register(subparsers) -> None:
    parser = subparsers.add_parser("elbow", help="Write the SSE curve and curvature scores as CSV")
    parser.add_argument("--embeddings", required=True, help="Embedding file")
    parser.add_argument("--output", required=True, help="CSV file to write")
    parser.add_argument("--k-max", type=int, default=MODEL_PARAMETERS["clustering"]["k_max"])
    parser.add_argument("--seed", type=int, default=0, help="Master seed")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    report = elbow_select(load_embeddings(args.embeddings), k_max=args.k_max, seed=substream_seed(args.seed, CLUSTERING))
    report.to_csv(args.output)
    print(f"selected_k={report.selected_k}")
    return 0
