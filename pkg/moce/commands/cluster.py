import argparse
import logging

from ..services.clustering_service import ClusteringService, save_kmeans
from ..services.embedding_service import load_embeddings
from ..utils.seeding import CLUSTERING, substream_seed

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("cluster", help="Fit the sequence clustering model")
    parser.add_argument("--embeddings", required=True, help="Embedding file")
    parser.add_argument("--output", required=True, help="Clustering model file to write")
    choice = parser.add_mutually_exclusive_group(required=True)
    choice.add_argument("--k", type=int, help="Fixed number of clusters")
    choice.add_argument("--elbow", action="store_true", help="Select k with the elbow method")
    parser.add_argument("--k-max", type=int, default=None, help="Largest k tried by --elbow")
    parser.add_argument("--elbow-csv", default=None, help="Also write the elbow report here")
    parser.add_argument("--seed", type=int, default=0, help="Master seed")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    embeddings = load_embeddings(args.embeddings)
    service = ClusteringService(seed=substream_seed(args.seed, CLUSTERING))
    if args.elbow:
        report, model, _ = service.select(embeddings, args.k_max or service.config["k_max"])
        if args.elbow_csv:
            report.to_csv(args.elbow_csv)
    else:
        model, _ = service.fit(embeddings, args.k)
    save_kmeans(model, args.output)
    logger.info(f"Wrote k={model.k} clustering model to {args.output}")
    return 0
