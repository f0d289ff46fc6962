import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from ..models.kmeans import KMeansModel
from ..models.transformer import MoCEModel
from ..schemas.config import ModelConfig
from ..utils.exceptions import ConfigurationError, DataFormatError
from ..utils.tokenizer import WhitespaceTokenizer
from .clustering_service import load_kmeans, save_kmeans
from .model_service import set_trainable

logger = logging.getLogger(__name__)

MANIFEST_HEADER = "MOCE-CKPT v1"
MANIFEST_FILE = "manifest.txt"
PARAMETERS_FILE = "parameters.bin"
CLUSTERING_FILE = "clustering.txt"
VOCAB_FILE = "vocab.txt"
BLOB_MAGIC = b"MOCEPAR1"


@dataclass
class Checkpoint:
    model: MoCEModel
    tokenizer: WhitespaceTokenizer
    step: int = 0
    path: Optional[Path] = None
    metadata: Dict[str, str] = field(default_factory=dict)

    @property
    def clustering(self) -> KMeansModel:
        return self.model.clustering


def write_parameters(parameters: Dict[str, np.ndarray], path: Union[str, Path]) -> None:
    """Name table (length-prefixed names and shapes) followed by little-endian float64 blobs."""
    with open(path, "wb") as handle:
        handle.write(BLOB_MAGIC)
        handle.write(struct.pack("<I", len(parameters)))
        for name, array in parameters.items():
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<I", array.ndim))
            handle.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        for array in parameters.values():
            handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_parameters(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(BLOB_MAGIC):
        raise DataFormatError(f"{path}: not a parameter blob")
    offset = len(BLOB_MAGIC)

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(raw):
            raise DataFormatError(f"{path}: truncated parameter table")
        values = struct.unpack_from(fmt, raw, offset)
        offset += size
        return values

    (count,) = take("<I")
    table = []
    for _ in range(count):
        (length,) = take("<I")
        name = raw[offset:offset + length].decode("utf-8")
        offset += length
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        table.append((name, tuple(int(d) for d in shape)))

    parameters: Dict[str, np.ndarray] = {}
    for name, shape in table:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise DataFormatError(f"{path}: blob for '{name}' is truncated")
        parameters[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes after the last blob")
    return parameters


def save_checkpoint(
    model: MoCEModel,
    tokenizer: WhitespaceTokenizer,
    directory: Union[str, Path],
    step: int = 0,
    metadata: Optional[Dict[str, object]] = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if model.clustering is None:
        raise ConfigurationError("Cannot checkpoint a model without its clustering model")

    write_parameters({name: t.data for name, t in model.parameters().items()}, directory / PARAMETERS_FILE)
    save_kmeans(model.clustering, directory / CLUSTERING_FILE)
    tokenizer.save(directory / VOCAB_FILE)

    lines = [MANIFEST_HEADER, f"seed = {model.config.seed}", f"step = {step}"]
    lines.append(f"clustering_path = {CLUSTERING_FILE}")
    lines.append(f"vocab_path = {VOCAB_FILE}")
    lines.append(f"parameters_path = {PARAMETERS_FILE}")
    for key, value in model.config.model_dump().items():
        lines.append(f"config.{key} = {value}")
    for key, value in (metadata or {}).items():
        lines.append(f"meta.{key} = {value}")
    (directory / MANIFEST_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Saved checkpoint at step {step} to {directory}")
    return directory


def _read_manifest(path: Path) -> Dict[str, str]:
    if not path.exists():
        raise FileNotFoundError(f"No checkpoint manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise DataFormatError(f"{path}: expected '{MANIFEST_HEADER}' header")
    entries: Dict[str, str] = {}
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{line_number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    return entries


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    directory = Path(directory)
    manifest = _read_manifest(directory / MANIFEST_FILE)
    config_values = {
        key[len("config."):]: (None if value == "None" else value)
        for key, value in manifest.items()
        if key.startswith("config.")
    }
    try:
        config = ModelConfig.model_validate(config_values)
    except ValueError as e:
        raise DataFormatError(f"{directory}: invalid model config in manifest: {e}") from e

    model = MoCEModel.skeleton(config)
    stored = read_parameters(directory / manifest.get("parameters_path", PARAMETERS_FILE))
    expected = model.parameters()
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        raise DataFormatError(f"{directory}: parameter names differ (missing {missing[:3]}, unexpected {unexpected[:3]})")
    for name, tensor in expected.items():
        if stored[name].shape != tensor.shape:
            raise DataFormatError(f"{directory}: parameter '{name}' has shape {stored[name].shape}, expected {tensor.shape}")
        tensor.data[...] = stored[name]
    set_trainable(model, config.train_attention, config.train_base)

    model.clustering = load_kmeans(directory / manifest.get("clustering_path", CLUSTERING_FILE))
    if model.clustering.k != config.num_groups:
        raise ConfigurationError(
            f"Checkpoint clustering model has {model.clustering.k} clusters but the model has {config.num_groups} groups"
        )
    tokenizer = WhitespaceTokenizer.load(directory / manifest.get("vocab_path", VOCAB_FILE))
    metadata = {key[len("meta."):]: value for key, value in manifest.items() if key.startswith("meta.")}
    return Checkpoint(
        model=model,
        tokenizer=tokenizer,
        step=int(manifest.get("step", 0)),
        path=directory,
        metadata=metadata,
    )
