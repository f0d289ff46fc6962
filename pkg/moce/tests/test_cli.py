import json

import pytest
from pydantic import ValidationError

from moce.main import build_parser, main
from moce.middleware.error_handler import ErrorHandler
from moce.schemas.config import RunConfig
from moce.services.clustering_service import load_kmeans
from moce.services.dataset_service import write_dataset
from moce.services.embedding_service import load_embeddings
from moce.utils.exceptions import (
    ConfigurationError,
    ContractError,
    DataFormatError,
    NumericError,
    SetupError,
    ShapeError,
)


@pytest.mark.parametrize(
    "exc, code",
    [
        (ConfigurationError("bad key"), 2),
        (SetupError("empty cluster"), 2),
        (DataFormatError("line 3"), 3),
        (ContractError("k out of range"), 3),
        (ShapeError("2x3 vs 4x1"), 3),
        (FileNotFoundError("missing.jsonl"), 3),
        (NumericError("nan at step 4"), 4),
        (RuntimeError("boom"), 1),
    ],
)
def test_error_handler_exit_codes(exc, code):
    handler = ErrorHandler()
    assert handler.handle_error(exc) == code
    assert handler.last_response["success"] is False
    assert handler.last_response["error"]["detail"] == str(exc)


def test_pydantic_errors_are_configuration_errors():
    with pytest.raises(ValidationError) as info:
        RunConfig(num_groups=0)
    assert ErrorHandler().handle_error(info.value) == 2
    assert ErrorHandler()._create_error_response("x", "config_error")["error"] == {"type": "config_error", "message": "x"}


def test_parser_requires_a_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


@pytest.fixture
def corpus_file(tmp_path, dialect_records):
    path = tmp_path / "train.jsonl"
    write_dataset(dialect_records, path)
    return path


def test_embed_cluster_and_elbow_commands(tmp_path, corpus_file, capsys):
    embeddings = tmp_path / "emb.txt"
    assert main(["embed", "--data", str(corpus_file), "--output", str(embeddings), "--dim", "16"]) == 0
    loaded = load_embeddings(embeddings)
    assert (len(loaded), loaded.dimension) == (24, 16)

    clustering = tmp_path / "clustering.txt"
    assert main(["cluster", "--embeddings", str(embeddings), "--output", str(clustering), "--k", "2"]) == 0
    assert load_kmeans(clustering).k == 2

    elbow_csv = tmp_path / "elbow.csv"
    assert main(["elbow", "--embeddings", str(embeddings), "--output", str(elbow_csv), "--k-max", "4"]) == 0
    assert "selected_k=" in capsys.readouterr().out
    assert elbow_csv.read_text().splitlines()[0] == "k,sse,curvature"

    selected = tmp_path / "selected.txt"
    args = ["cluster", "--embeddings", str(embeddings), "--output", str(selected), "--elbow", "--k-max", "4"]
    assert main(args) == 0
    assert 2 <= load_kmeans(selected).k <= 3


def test_train_eval_and_route_stats_commands(tmp_path, corpus_file, capsys):
    config = tmp_path / "run.txt"
    config.write_text(
        "\n".join([
            f"train_path = {corpus_file}",
            f"output_dir = {tmp_path / 'run'}",
            "num_groups = 2",
            "d_model = 8",
            "n_layers = 1",
            "n_heads = 2",
            "max_seq_len = 16",
            "adapter_rank = 4",
            "num_experts = 2",
            "top_k = 1",
            "batch_size = 8",
            "max_steps = 2",
            "embedding_dim = 16",
        ]) + "\n"
    )
    assert main(["train", "--config", str(config)]) == 0
    checkpoint = tmp_path / "run" / "checkpoint"
    assert (checkpoint / "manifest.txt").exists()

    assert main(["eval", "--checkpoint", str(checkpoint), "--data", str(corpus_file), "--output", str(tmp_path / "eval")]) == 0
    assert (tmp_path / "eval" / "eval_metrics.json").exists()

    stats = tmp_path / "stats"
    assert main(["route-stats", "--checkpoint", str(checkpoint), "--data", str(corpus_file), "--output", str(stats)]) == 0
    assert (stats / "route_stats.csv").exists()
    assert "eval_loss=" in capsys.readouterr().out


def test_bad_config_exits_with_configuration_code(tmp_path):
    config = tmp_path / "run.txt"
    config.write_text("num_groups = 2\nlearning_rat = 0.1\n")
    assert main(["train", "--config", str(config)]) == 2


def test_missing_dataset_exits_with_input_code(tmp_path):
    assert main(["embed", "--data", str(tmp_path / "nope.jsonl"), "--output", str(tmp_path / "e.txt")]) == 3


def test_missing_checkpoint_exits_with_input_code(tmp_path, corpus_file):
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(corpus_file)]) == 3


def error_payload(stderr):
    lines = [line for line in stderr.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


def test_error_payload_is_written_to_stderr(tmp_path, capsys):
    assert main(["embed", "--data", str(tmp_path / "nope.jsonl"), "--output", str(tmp_path / "e.txt")]) == 3
    payload = error_payload(capsys.readouterr().err)
    assert payload["success"] is False
    assert payload["error"]["type"] == "data_format_error"
    assert "nope.jsonl" in payload["error"]["detail"]
    assert "traceback" not in payload["error"]


def test_traceback_flag_adds_the_traceback(tmp_path, capsys):
    args = ["--traceback", "embed", "--data", str(tmp_path / "nope.jsonl"), "--output", str(tmp_path / "e.txt")]
    assert main(args) == 3
    payload = error_payload(capsys.readouterr().err)
    assert payload["error"]["traceback"].startswith("Traceback")


def test_unknown_log_level_exits_with_configuration_code(tmp_path, corpus_file, capsys):
    args = ["--log-level", "LOUD", "embed", "--data", str(corpus_file), "--output", str(tmp_path / "e.txt")]
    assert main(args) == 2
    payload = error_payload(capsys.readouterr().err)
    assert payload["error"]["type"] == "config_error"
    assert "LOUD" in payload["error"]["detail"]
    assert not (tmp_path / "e.txt").exists()
