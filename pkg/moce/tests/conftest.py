import numpy as np
import pytest

from moce.schemas.config import ModelConfig, RunConfig
from moce.services.dataset_service import two_dialect_corpus


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    return ModelConfig(
        vocab_size=11,
        d_model=8,
        n_layers=2,
        n_heads=2,
        max_seq_len=16,
        adapter_rank=4,
        num_groups=2,
        num_experts=2,
        top_k=2,
        seed=3,
    )


@pytest.fixture
def dialect_records():
    return two_dialect_corpus(24, seed=5)


@pytest.fixture
def tiny_run_config(tmp_path):
    return RunConfig(
        output_dir=str(tmp_path / "run"),
        num_groups=2,
        d_model=8,
        n_layers=1,
        n_heads=2,
        max_seq_len=16,
        adapter_rank=4,
        num_experts=2,
        top_k=1,
        batch_size=8,
        max_steps=3,
        embedding_dim=16,
        learning_rate=1e-2,
        seed=7,
    )
