import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from sklearn.utils import murmurhash3_32

from ..config.moce_config import MODEL_PARAMETERS
from ..models.embedding import NORM_TOLERANCE, EmbeddingSet, SequenceEmbedding
from ..schemas.instruction import InstructionRecord
from ..utils.exceptions import ContractError, DataFormatError, NumericError
from ..utils.tokenizer import WhitespaceTokenizer

logger = logging.getLogger(__name__)

EMBEDDING_HEADER = "MOCE-EMB v1"

Token = Union[int, str]


def _hashed_feature(key: str, seed: int, dimension: int):
    h = murmurhash3_32(key, seed=seed & 0xFFFFFFFF)
    return abs(h) % dimension, (1.0 if h >= 0 else -1.0)


def embed_sequence(tokens: Sequence[Token], dimension: int = 64, seed: int = 0, source_id: str = "") -> SequenceEmbedding:
    """Feature-hash unigrams and bigrams into ``dimension`` signed buckets, mean-pool, L2-normalize."""
    if len(tokens) == 0:
        raise ContractError("Cannot embed an empty token sequence")
    if dimension < 1:
        raise ContractError(f"Embedding dimension must be positive, got {dimension}")

    pooled = np.zeros(dimension, dtype=np.float64)
    features = [f"u:{t}" for t in tokens]
    features += [f"b:{a}:{b}" for a, b in zip(tokens[:-1], tokens[1:])]
    for key in features:
        bucket, sign = _hashed_feature(key, seed, dimension)
        pooled[bucket] += sign
    pooled /= len(features)

    # 2n-1 features of weight +-1 can never cancel to the zero vector.
    return SequenceEmbedding(pooled / np.linalg.norm(pooled), source_id=source_id)


def save_embeddings(embedding_set: EmbeddingSet, path: Union[str, Path], precision: Optional[int] = None) -> None:
    digits = precision or MODEL_PARAMETERS["embedding"]["file_precision"]
    lines = [f"{EMBEDDING_HEADER} {len(embedding_set)} {embedding_set.dimension}"]
    for embedding in embedding_set:
        if not embedding.source_id or any(ch.isspace() for ch in embedding.source_id):
            raise ContractError(f"Source id '{embedding.source_id}' must be non-empty and contain no whitespace")
        values = " ".join(f"{v:.{digits}g}" for v in embedding.vector.astype(np.float32))
        lines.append(f"{embedding.source_id} {values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(embedding_set)} embeddings of dimension {embedding_set.dimension} to {path}")


def load_embeddings(path: Union[str, Path]) -> EmbeddingSet:
    """Parse an embedding file, normalizing rows that are not already unit length."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty embedding file")
    header = lines[0].split()
    if len(header) != 4 or " ".join(header[:2]) != EMBEDDING_HEADER:
        raise DataFormatError(f"{path}: expected header '{EMBEDDING_HEADER} <count> <dim>', got '{lines[0]}'")
    try:
        count, dimension = int(header[2]), int(header[3])
    except ValueError:
        raise DataFormatError(f"{path}: non-integer count or dimension in header '{lines[0]}'")

    rows = [line for line in lines[1:] if line.strip()]
    if len(rows) != count:
        raise DataFormatError(f"{path}: header declares {count} rows, found {len(rows)}")

    embeddings: List[SequenceEmbedding] = []
    for row, line in enumerate(rows):
        fields = line.split()
        if len(fields) - 1 != dimension:
            raise DataFormatError(f"{path}: row {row} has {len(fields) - 1} values, expected {dimension}")
        try:
            vector = np.array([float(v) for v in fields[1:]], dtype=np.float64)
        except ValueError:
            raise DataFormatError(f"{path}: row {row} contains a non-numeric value")
        if not np.all(np.isfinite(vector)):
            raise NumericError(f"{path}: row {row} contains non-finite values")
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise NumericError(f"{path}: row {row} is the zero vector and cannot be normalized")
        if abs(norm - 1.0) > NORM_TOLERANCE:
            vector = vector / norm
        embeddings.append(SequenceEmbedding(vector, source_id=fields[0]))
    return EmbeddingSet(dimension=dimension, embeddings=embeddings)


class EmbeddingService:
    """Turns instruction records into sequence embeddings for group routing."""

    def __init__(self, dimension: Optional[int] = None, seed: int = 0, fields: Optional[str] = None):
        self.config = MODEL_PARAMETERS["embedding"]
        self.dimension = dimension or self.config["dimension"]
        self.seed = seed
        self.fields = fields or self.config["fields"]

    def text_for(self, record: InstructionRecord) -> str:
        if self.fields == "instruction_response":
            return f"{record.instruction} {record.response}"
        return record.instruction

    def embed_text(self, text: str, tokenizer: WhitespaceTokenizer, source_id: str = "") -> SequenceEmbedding:
        return embed_sequence(tokenizer.encode(text), self.dimension, self.seed, source_id=source_id)

    def embed_records(self, records: Sequence[InstructionRecord], tokenizer: WhitespaceTokenizer) -> EmbeddingSet:
        embeddings = [self.embed_text(self.text_for(r), tokenizer, source_id=r.id) for r in records]
        logger.info(f"Embedded {len(embeddings)} sequences (d_e={self.dimension}, fields={self.fields})")
        return EmbeddingSet(dimension=self.dimension, embeddings=embeddings)

    def align(self, embedding_set: EmbeddingSet, records: Sequence[InstructionRecord]) -> EmbeddingSet:
        """Reorder externally produced embeddings to follow ``records``."""
        lookup = embedding_set.by_source_id()
        missing = [r.id for r in records if r.id not in lookup]
        if missing:
            raise DataFormatError(f"No embedding for record ids {missing[:5]}{'...' if len(missing) > 5 else ''}")
        return EmbeddingSet(embedding_set.dimension, [lookup[r.id] for r in records])
