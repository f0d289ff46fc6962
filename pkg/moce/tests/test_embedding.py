import numpy as np
import pytest

from moce.models.embedding import EmbeddingSet, SequenceEmbedding
from moce.services.embedding_service import (
    EmbeddingService,
    embed_sequence,
    load_embeddings,
    save_embeddings,
)
from moce.utils.exceptions import ContractError, DataFormatError, NumericError
from moce.utils.tokenizer import WhitespaceTokenizer


def test_embedding_is_unit_norm_and_deterministic():
    first = embed_sequence([5, 9, 12, 5], dimension=32, seed=3)
    second = embed_sequence([5, 9, 12, 5], dimension=32, seed=3)
    assert abs(np.linalg.norm(first.vector) - 1.0) < 1e-12
    np.testing.assert_array_equal(first.vector, second.vector)


def test_single_token_hits_one_bucket():
    vector = embed_sequence(["hello"], dimension=16).vector
    assert np.count_nonzero(vector) == 1
    assert abs(abs(vector).max() - 1.0) < 1e-12


def test_seed_changes_the_embedding():
    a = embed_sequence(list(range(10)), dimension=64, seed=0).vector
    b = embed_sequence(list(range(10)), dimension=64, seed=1).vector
    assert not np.array_equal(a, b)


def test_empty_sequence_is_rejected():
    with pytest.raises(ContractError):
        embed_sequence([], dimension=8)


def test_disjoint_vocabularies_are_far_apart(dialect_records):
    tokenizer = WhitespaceTokenizer.fit(r.instruction for r in dialect_records)
    service = EmbeddingService(dimension=64, seed=0)
    embeddings = service.embed_records(dialect_records, tokenizer)
    sources = [r.source for r in dialect_records]
    matrix = embeddings.matrix()
    same = [matrix[i] @ matrix[j] for i in range(len(sources)) for j in range(i) if sources[i] == sources[j]]
    cross = [matrix[i] @ matrix[j] for i in range(len(sources)) for j in range(i) if sources[i] != sources[j]]
    assert np.mean(same) > np.mean(cross) + 0.1


def test_random_disjoint_vocabulary_pairs_are_nearly_orthogonal():
    rng = np.random.default_rng(0)
    cosines = []
    for _ in range(100):
        first = rng.integers(0, 1000, size=int(rng.integers(3, 12))).tolist()
        second = rng.integers(1000, 2000, size=int(rng.integers(3, 12))).tolist()
        a = embed_sequence(first, dimension=64, seed=0).vector
        b = embed_sequence(second, dimension=64, seed=0).vector
        cosines.append(float(a @ b))
    assert np.mean(cosines) < 0.5
    assert abs(np.mean(cosines)) < 0.1


def test_file_round_trip(tmp_path):
    embeddings = EmbeddingSet(
        dimension=8,
        embeddings=[embed_sequence([i, i + 1, i + 2], dimension=8, seed=1, source_id=f"r{i}") for i in range(5)],
    )
    path = tmp_path / "emb.txt"
    save_embeddings(embeddings, path)
    assert path.read_text().splitlines()[0] == "MOCE-EMB v1 5 8"
    loaded = load_embeddings(path)
    assert loaded.source_ids == embeddings.source_ids
    np.testing.assert_allclose(loaded.matrix(), embeddings.matrix(), atol=1e-7)
    for embedding in loaded:
        assert abs(np.linalg.norm(embedding.vector) - 1.0) <= 1e-9


def test_load_renormalizes_rows(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("MOCE-EMB v1 1 2\nx 3.0 4.0\n")
    np.testing.assert_allclose(load_embeddings(path)[0].vector, [0.6, 0.8])


def test_wrong_row_length_names_the_row(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("MOCE-EMB v1 2 3\na 1 0 0\nb 1 0\n")
    with pytest.raises(DataFormatError, match="row 1"):
        load_embeddings(path)


def test_zero_or_nonfinite_rows_are_numeric_errors(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("MOCE-EMB v1 1 2\na 0 0\n")
    with pytest.raises(NumericError):
        load_embeddings(path)
    path.write_text("MOCE-EMB v1 1 2\na nan 1\n")
    with pytest.raises(NumericError):
        load_embeddings(path)


def test_sequence_embedding_requires_unit_norm():
    with pytest.raises(ContractError):
        SequenceEmbedding(np.array([1.0, 1.0]))


def test_align_reorders_by_record_id(dialect_records):
    tokenizer = WhitespaceTokenizer.fit(r.instruction for r in dialect_records)
    service = EmbeddingService(dimension=16, seed=0)
    embeddings = service.embed_records(dialect_records, tokenizer)
    reversed_set = EmbeddingSet(16, list(reversed(embeddings.embeddings)))
    aligned = service.align(reversed_set, dialect_records)
    assert aligned.source_ids == [r.id for r in dialect_records]
    with pytest.raises(DataFormatError):
        service.align(EmbeddingSet(16, embeddings.embeddings[:3]), dialect_records)


def test_tokenizer_byte_fallback_round_trip(tmp_path):
    tokenizer = WhitespaceTokenizer.fit(["alpha beta"])
    ids = tokenizer.encode("alpha gamma")
    assert tokenizer.decode(ids) == "alpha gamma"
    tokenizer.save(tmp_path / "vocab.txt")
    assert WhitespaceTokenizer.load(tmp_path / "vocab.txt").encode("alpha gamma") == ids
