import argparse
import logging

from ..config.moce_config import MODEL_PARAMETERS
from ..services.dataset_service import build_tokenizer, ingest_dataset
from ..services.embedding_service import EmbeddingService, save_embeddings
from ..utils.seeding import EMBEDDER, substream_seed

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("embed", help="Embed a JSONL corpus into an embedding file")
    parser.add_argument("--data", required=True, help="Line-delimited JSON instruction records")
    parser.add_argument("--output", required=True, help="Embedding file to write")
    parser.add_argument("--dim", type=int, default=MODEL_PARAMETERS["embedding"]["dimension"])
    parser.add_argument("--fields", choices=["instruction", "instruction_response"], default=None)
    parser.add_argument("--seed", type=int, default=0, help="Master seed")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    records = ingest_dataset(args.data)
    service = EmbeddingService(args.dim, substream_seed(args.seed, EMBEDDER), args.fields)
    save_embeddings(service.embed_records(records, build_tokenizer(records)), args.output)
    return 0
