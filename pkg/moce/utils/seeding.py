import zlib

import numpy as np

# Named substreams drawn from the single master seed.
EMBEDDER = "embedder"
CLUSTERING = "clustering"
INIT = "init"
DATA_ORDER = "data_order"
DENSE_INIT = "dense_init"


def substream_seed(master_seed: int, name: str) -> int:
    """Deterministic 32-bit seed for the substream ``name``."""
    sequence = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def substream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(master_seed, name))
