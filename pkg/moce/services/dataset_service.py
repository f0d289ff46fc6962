import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from sklearn.datasets import make_blobs

from ..models.sequence import EncodedSequence
from ..schemas.instruction import InstructionRecord
from ..utils.data_cleaning import clean_record_data
from ..utils.exceptions import ContractError, DataFormatError
from ..utils.tokenizer import BOS_ID, EOS_ID, SEP_ID, WhitespaceTokenizer

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("id", "instruction", "response")

DIALECT_WORDS = 12


def ingest_dataset(path: Union[str, Path]) -> List[InstructionRecord]:
    """Read line-delimited JSON instruction records, preserving file order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset not found: {path}")

    records: List[InstructionRecord] = []
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}: line {line_number}: invalid JSON ({e.msg})")
            if not isinstance(data, dict):
                raise DataFormatError(f"{path}: line {line_number}: expected a JSON object")
            missing = [name for name in REQUIRED_FIELDS if name not in data]
            if missing:
                raise DataFormatError(f"{path}: line {line_number}: missing field(s) {', '.join(missing)}")
            try:
                records.append(InstructionRecord(**clean_record_data(data)))
            except ValidationError as e:
                raise DataFormatError(f"{path}: line {line_number}: {e.errors()[0]['msg']}")

    if not records:
        raise ContractError(f"Dataset {path} contains no records")
    logger.info(f"Ingested {len(records)} records from {path}")
    return records


def write_dataset(records: Sequence[InstructionRecord], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.model_dump(exclude_none=True), ensure_ascii=False) + "\n")


def build_tokenizer(records: Sequence[InstructionRecord]) -> WhitespaceTokenizer:
    return WhitespaceTokenizer.fit(text for r in records for text in (r.instruction, r.response))


def encode_record(record: InstructionRecord, tokenizer: WhitespaceTokenizer, max_seq_len: Optional[int] = None) -> EncodedSequence:
    instruction = tokenizer.encode(record.instruction)
    response = tokenizer.encode(record.response)
    tokens = [BOS_ID] + instruction + [SEP_ID] + response + [EOS_ID]
    inputs, targets = tokens[:-1], tokens[1:]
    if max_seq_len is not None and len(inputs) > max_seq_len:
        raise ContractError(f"Record {record.id} encodes to {len(inputs)} tokens, over max_seq_len {max_seq_len}")

    # The input at [SEP] is the first position that predicts a response token.
    mask = np.arange(len(inputs)) >= len(instruction) + 1
    return EncodedSequence(
        record_id=record.id,
        input_ids=np.asarray(inputs, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.int64),
        loss_mask=mask,
        prompt_ids=[BOS_ID] + instruction + [SEP_ID],
        response_ids=response,
        source=record.source or "",
    )


def _dialect_a(rng: np.random.Generator, length: int) -> Tuple[str, str]:
    """Increment-copy: every a<i> becomes a<i+1 mod 12>."""
    values = rng.integers(0, DIALECT_WORDS, size=length)
    instruction = "step " + " ".join(f"a{v}" for v in values)
    response = " ".join(f"a{(v + 1) % DIALECT_WORDS}" for v in values)
    return instruction, response


def _dialect_b(rng: np.random.Generator, length: int) -> Tuple[str, str]:
    """Reversal over the disjoint b-word range."""
    values = rng.integers(0, DIALECT_WORDS, size=length)
    instruction = "flip " + " ".join(f"b{v}" for v in values)
    response = " ".join(f"b{v}" for v in values[::-1])
    return instruction, response


def two_dialect_corpus(
    count: int,
    seed: int = 0,
    share_a: float = 0.5,
    min_length: int = 3,
    max_length: int = 5,
    prefix: str = "ex",
) -> List[InstructionRecord]:
    """Toy corpus of two disjoint task dialects, tagged ``dialect_a`` / ``dialect_b``.

    Dialects alternate in proportion ``share_a`` so any prefix holds both.
    """
    if count < 1:
        raise ContractError(f"Corpus size must be positive, got {count}")
    rng = np.random.default_rng(seed)
    records: List[InstructionRecord] = []
    n_a = int(round(count * share_a))
    for index in range(count):
        length = int(rng.integers(min_length, max_length + 1))
        is_a = (index * n_a) // count != ((index + 1) * n_a) // count
        instruction, response = (_dialect_a if is_a else _dialect_b)(rng, length)
        records.append(
            InstructionRecord(
                id=f"{prefix}{index}",
                instruction=instruction,
                response=response,
                source="dialect_a" if is_a else "dialect_b",
            )
        )
    return records


def skewed_corpus(count: int, seed: int = 0, share_a: float = 0.9) -> List[InstructionRecord]:
    """Two-dialect corpus dominated by dialect A."""
    return two_dialect_corpus(count, seed=seed, share_a=share_a, prefix="skew")


def planted_blobs(
    n_centers: int,
    per_blob: int,
    seed: int = 0,
    separation: float = 10.0,
    radius: float = 0.1,
) -> Tuple[np.ndarray, np.ndarray]:
    """Isotropic Gaussian blobs at mutually equidistant centers (scaled basis vectors)."""
    centers = np.eye(n_centers) * separation
    points, labels = make_blobs(
        n_samples=[per_blob] * n_centers,
        centers=centers,
        cluster_std=radius,
        random_state=seed,
    )
    return points, labels
