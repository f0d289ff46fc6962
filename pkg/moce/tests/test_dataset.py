import json

import numpy as np
import pytest

from moce.schemas.instruction import InstructionRecord
from moce.services.dataset_service import (
    build_tokenizer,
    encode_record,
    ingest_dataset,
    planted_blobs,
    skewed_corpus,
    two_dialect_corpus,
    write_dataset,
)
from moce.utils.exceptions import ContractError, DataFormatError
from moce.utils.tokenizer import BOS_ID, EOS_ID, SEP_ID


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def test_ingest_two_records_in_order(tmp_path):
    path = write_lines(tmp_path / "data.jsonl", [
        json.dumps({"id": "r1", "instruction": "say hi", "response": "hi", "source": "greet"}),
        "",
        json.dumps({"id": "r2", "instruction": "say bye", "response": "bye", "extra": 1}),
    ])
    records = ingest_dataset(path)
    assert [r.id for r in records] == ["r1", "r2"]
    assert records[0].source == "greet"
    assert records[1].source is None


def test_missing_field_names_the_line(tmp_path):
    path = write_lines(tmp_path / "data.jsonl", [json.dumps({"id": "r1", "instruction": "say hi"})])
    with pytest.raises(DataFormatError, match="line 1.*response"):
        ingest_dataset(path)


def test_invalid_json_names_the_line(tmp_path):
    path = write_lines(tmp_path / "data.jsonl", [
        json.dumps({"id": "r1", "instruction": "a", "response": "b"}),
        "{not json",
    ])
    with pytest.raises(DataFormatError, match="line 2"):
        ingest_dataset(path)


def test_blank_field_is_rejected(tmp_path):
    path = write_lines(tmp_path / "data.jsonl", [json.dumps({"id": "r1", "instruction": "   ", "response": "b"})])
    with pytest.raises(DataFormatError, match="line 1"):
        ingest_dataset(path)


def test_empty_file_and_missing_file(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(ContractError):
        ingest_dataset(empty)
    with pytest.raises(FileNotFoundError):
        ingest_dataset(tmp_path / "nope.jsonl")


def test_write_then_ingest_preserves_records(tmp_path):
    records = two_dialect_corpus(100, seed=2)
    write_dataset(records, tmp_path / "data.jsonl")
    assert ingest_dataset(tmp_path / "data.jsonl") == records


def test_encode_record_layout():
    record = InstructionRecord(id="r1", instruction="step a1 a2", response="a2 a3")
    tokenizer = build_tokenizer([record])
    sequence = encode_record(record, tokenizer)
    instruction = tokenizer.encode("step a1 a2")
    response = tokenizer.encode("a2 a3")
    tokens = [BOS_ID] + instruction + [SEP_ID] + response + [EOS_ID]
    assert sequence.input_ids.tolist() == tokens[:-1]
    assert sequence.targets.tolist() == tokens[1:]
    # Supervised positions predict the response tokens and the closing EOS.
    assert sequence.loss_mask.tolist() == [False] * 4 + [True] * 3
    assert sequence.targets[sequence.loss_mask].tolist() == response + [EOS_ID]
    assert sequence.prompt_ids == [BOS_ID] + instruction + [SEP_ID]
    assert sequence.response_ids == response
    assert sequence.supervised_tokens == 3


def test_encode_record_enforces_context():
    record = InstructionRecord(id="r1", instruction="a b c d", response="e f")
    with pytest.raises(ContractError):
        encode_record(record, build_tokenizer([record]), max_seq_len=6)


def test_dialect_corpus_shape():
    records = two_dialect_corpus(40, seed=1, share_a=0.25)
    sources = [r.source for r in records]
    assert sources.count("dialect_a") == 10
    assert sources.count("dialect_b") == 30
    assert {"dialect_a", "dialect_b"} <= set(sources[:8])
    for record in records:
        words = record.instruction.split()
        if record.source == "dialect_a":
            assert words[0] == "step"
            expected = [f"a{(int(w[1:]) + 1) % 12}" for w in words[1:]]
        else:
            assert words[0] == "flip"
            expected = words[1:][::-1]
        assert record.response.split() == expected
        assert 3 <= len(words) - 1 <= 5


def test_corpus_is_seeded():
    assert two_dialect_corpus(10, seed=3) == two_dialect_corpus(10, seed=3)
    assert two_dialect_corpus(10, seed=3) != two_dialect_corpus(10, seed=4)


def test_skewed_corpus_share():
    sources = [r.source for r in skewed_corpus(50, seed=0)]
    assert sources.count("dialect_a") == 45


def test_planted_blobs():
    points, labels = planted_blobs(3, 5, seed=0)
    assert points.shape == (15, 3)
    assert np.bincount(labels).tolist() == [5, 5, 5]
