from dataclasses import dataclass, field
from typing import Iterator, List

import numpy as np

from ..config.moce_config import MODEL_PARAMETERS
from ..utils.exceptions import ContractError, NumericError, ShapeError

NORM_TOLERANCE = MODEL_PARAMETERS["embedding"]["norm_tolerance"]


@dataclass(frozen=True)
class SequenceEmbedding:
    """Unit-norm vector standing for one whole input sequence."""

    vector: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        vector = np.asarray(self.vector, dtype=np.float64)
        if vector.ndim != 1 or vector.size == 0:
            raise ShapeError(f"Embedding vector must be 1-D and non-empty, got shape {vector.shape}")
        if not np.all(np.isfinite(vector)):
            raise NumericError(f"Embedding '{self.source_id}' contains non-finite values")
        norm = float(np.linalg.norm(vector))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise ContractError(f"Embedding '{self.source_id}' has norm {norm:.12f}, expected 1")
        object.__setattr__(self, "vector", vector)

    @property
    def dimension(self) -> int:
        return int(self.vector.size)


@dataclass
class EmbeddingSet:
    dimension: int
    embeddings: List[SequenceEmbedding] = field(default_factory=list)

    def __post_init__(self):
        for row, embedding in enumerate(self.embeddings):
            if embedding.dimension != self.dimension:
                raise ShapeError(
                    f"Embedding {row} ('{embedding.source_id}') has dimension "
                    f"{embedding.dimension}, expected {self.dimension}"
                )

    def __len__(self) -> int:
        return len(self.embeddings)

    def __iter__(self) -> Iterator[SequenceEmbedding]:
        return iter(self.embeddings)

    def __getitem__(self, index: int) -> SequenceEmbedding:
        return self.embeddings[index]

    @property
    def source_ids(self) -> List[str]:
        return [e.source_id for e in self.embeddings]

    def matrix(self) -> np.ndarray:
        if not self.embeddings:
            return np.zeros((0, self.dimension))
        return np.stack([e.vector for e in self.embeddings])

    def by_source_id(self) -> dict:
        return {e.source_id: e for e in self.embeddings}
