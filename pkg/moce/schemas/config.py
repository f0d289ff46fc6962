import re
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..config.moce_config import MODEL_PARAMETERS
from ..utils.exceptions import ConfigurationError

_MOCE = MODEL_PARAMETERS["moce"]
_MODEL = MODEL_PARAMETERS["model"]
_TRAINING = MODEL_PARAMETERS["training"]
_EMBEDDING = MODEL_PARAMETERS["embedding"]

# A comment starts at "#" opening the line or following whitespace; "run#1" is a value.
_COMMENT = re.compile(r"(?:^|\s)#")

Mode = Literal["topk", "soft"]
Activation = Literal["gelu", "relu", "silu"]


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(..., ge=2)
    d_model: int = Field(_MODEL["d_model"], ge=1)
    n_layers: int = Field(_MODEL["n_layers"], ge=1)
    n_heads: int = Field(_MODEL["n_heads"], ge=1)
    d_ff: Optional[int] = Field(None, ge=1)
    max_seq_len: int = Field(_MODEL["max_seq_len"], ge=1)
    adapter_rank: int = Field(_MOCE["adapter_rank"], ge=1)
    num_groups: int = Field(1, ge=1)
    num_experts: int = Field(_MOCE["num_experts"], ge=1)
    top_k: int = Field(_MOCE["top_k"], ge=1)
    mode: Mode = _MOCE["mode"]
    variant: bool = False
    activation: Activation = _MOCE["activation"]
    renormalize: bool = _MOCE["renormalize"]
    moe_scaling: float = _MOCE["moe_scaling"]
    train_attention: bool = _MODEL["train_attention"]
    train_base: bool = _MODEL["train_base"]
    init_std: float = Field(_MODEL["init_std"], gt=0)
    layer_norm_eps: float = Field(_MODEL["layer_norm_eps"], gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def check_shapes(self) -> "ModelConfig":
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.top_k > self.num_experts:
            raise ValueError(f"top_k ({self.top_k}) cannot exceed num_experts ({self.num_experts})")
        if self.d_ff is None:
            self.d_ff = self.d_model * _MODEL["ffn_multiplier"]
        return self

    @property
    def active_experts_per_token(self) -> int:
        per_path = self.num_experts if self.mode == "soft" else self.top_k
        return per_path * (2 if self.variant else 1)


class RunConfig(BaseModel):
    """Every knob of a train/eval run; serialized as flat ``key = value`` text."""

    model_config = ConfigDict(extra="forbid")

    # data
    train_path: Optional[str] = None
    eval_path: Optional[str] = None
    output_dir: str = "runs/default"

    # sequence embeddings
    embedding_source: Literal["toy", "file"] = "toy"
    embedding_path: Optional[str] = None
    embedding_dim: int = Field(_EMBEDDING["dimension"], ge=1)
    embed_fields: Literal["instruction", "instruction_response"] = _EMBEDDING["fields"]

    # clustering: exactly one of k_max (elbow) or num_groups (fixed M)
    k_max: Optional[int] = None
    num_groups: Optional[int] = Field(None, ge=1)

    # model
    d_model: int = Field(_MODEL["d_model"], ge=1)
    n_layers: int = Field(_MODEL["n_layers"], ge=1)
    n_heads: int = Field(_MODEL["n_heads"], ge=1)
    d_ff: Optional[int] = Field(None, ge=1)
    max_seq_len: int = Field(_MODEL["max_seq_len"], ge=1)
    adapter_rank: int = Field(_MOCE["adapter_rank"], ge=1)
    num_experts: int = Field(_MOCE["num_experts"], ge=1)
    top_k: int = Field(_MOCE["top_k"], ge=1)
    mode: Mode = _MOCE["mode"]
    variant: bool = False
    activation: Activation = _MOCE["activation"]
    renormalize: bool = _MOCE["renormalize"]
    moe_scaling: float = _MOCE["moe_scaling"]
    train_attention: bool = _MODEL["train_attention"]
    train_base: bool = _MODEL["train_base"]
    init_std: float = Field(_MODEL["init_std"], gt=0)

    # optimization
    learning_rate: float = Field(_TRAINING["learning_rate"], gt=0)
    batch_size: int = Field(_TRAINING["batch_size"], ge=1)
    epochs: int = Field(_TRAINING["epochs"], ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    balance_coefficient: float = Field(_MOCE["balance_coefficient"], ge=0)
    dense_pretrain_steps: int = Field(_TRAINING["dense_pretrain_steps"], ge=0)
    seed: int = 0

    # ablation switches
    no_clustering: bool = False
    no_token_routing: bool = False

    @model_validator(mode="after")
    def check_consistency(self) -> "RunConfig":
        if self.no_clustering:
            if self.k_max is not None:
                raise ValueError("no_clustering cannot be combined with k_max")
            if self.num_groups not in (None, 1):
                raise ValueError("no_clustering requires a single expert group")
        elif (self.k_max is None) == (self.num_groups is None):
            raise ValueError("Set exactly one of k_max (elbow selection) or num_groups (fixed M)")
        if self.k_max is not None and self.k_max < 3:
            raise ValueError(f"k_max must be at least 3, got {self.k_max}")
        if self.no_token_routing and (self.num_experts != 1 or self.top_k != 1):
            raise ValueError("no_token_routing requires num_experts = 1 and top_k = 1")
        if self.top_k > self.num_experts:
            raise ValueError(f"top_k ({self.top_k}) cannot exceed num_experts ({self.num_experts})")
        if self.embedding_source == "file" and not self.embedding_path:
            raise ValueError("embedding_source = file requires embedding_path")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        return self

    def build_model_config(self, vocab_size: int, num_groups: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            max_seq_len=self.max_seq_len,
            adapter_rank=self.adapter_rank,
            num_groups=num_groups,
            num_experts=self.num_experts,
            top_k=self.top_k,
            mode=self.mode,
            variant=self.variant,
            activation=self.activation,
            renormalize=self.renormalize,
            moe_scaling=self.moe_scaling,
            train_attention=self.train_attention,
            train_base=self.train_base,
            init_std=self.init_std,
            seed=self.seed,
        )

    @classmethod
    def from_mapping(cls, values: Dict[str, Any]) -> "RunConfig":
        try:
            return cls.model_validate(values)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid run configuration: {e}") from e

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        values: Dict[str, Any] = {}
        text = Path(path).read_text(encoding="utf-8")
        for line_number, raw in enumerate(text.splitlines(), start=1):
            line = _COMMENT.split(raw, 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{line_number}: expected 'key = value', got '{raw}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in values:
                raise ConfigurationError(f"{path}:{line_number}: duplicate key '{key}'")
            values[key] = None if value.lower() in ("", "none", "null") else value
        return cls.from_mapping(values)

    def to_file(self, path: Union[str, Path]) -> None:
        lines = []
        for key, value in self.model_dump().items():
            lines.append(f"{key} = {'none' if value is None else value}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
