from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from ..engine.tensor import Tensor
from ..schemas.config import ModelConfig
from .feed_forward import FeedForward
from .kmeans import KMeansModel
from .moce_layer import ExpertGroup, MoCELayer


def _normal(rng: Optional[np.random.Generator], shape, std: float) -> Tensor:
    data = np.zeros(shape) if rng is None else rng.normal(0.0, std, shape)
    return Tensor(data, requires_grad=True)


@dataclass
class Attention:
    """Causal multi-head self-attention without biases."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    @classmethod
    def initialize(cls, d_model: int, n_heads: int, rng: Optional[np.random.Generator], std: float) -> "Attention":
        return cls(*(_normal(rng, (d_model, d_model), std) for _ in range(4)), n_heads=n_heads)

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k, f"{prefix}.w_v": self.w_v, f"{prefix}.w_o": self.w_o}


@dataclass
class TransformerBlock:
    ln1_gamma: Tensor
    ln1_beta: Tensor
    attention: Attention
    ln2_gamma: Tensor
    ln2_beta: Tensor
    ffn: FeedForward

    @classmethod
    def initialize(cls, config: ModelConfig, rng: Optional[np.random.Generator]) -> "TransformerBlock":
        d = config.d_model
        return cls(
            ln1_gamma=Tensor(np.ones(d), requires_grad=True),
            ln1_beta=Tensor(np.zeros(d), requires_grad=True),
            attention=Attention.initialize(d, config.n_heads, rng, config.init_std),
            ln2_gamma=Tensor(np.ones(d), requires_grad=True),
            ln2_beta=Tensor(np.zeros(d), requires_grad=True),
            ffn=FeedForward.initialize(d, config.d_ff, rng, config.init_std),
        )

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        params = {f"{prefix}.ln1.gamma": self.ln1_gamma, f"{prefix}.ln1.beta": self.ln1_beta}
        params.update(self.attention.parameters(f"{prefix}.attention"))
        params.update({f"{prefix}.ln2.gamma": self.ln2_gamma, f"{prefix}.ln2.beta": self.ln2_beta})
        params.update(self.ffn.parameters(f"{prefix}.ffn"))
        return params


class DenseTransformer:
    """Decoder-only transformer with dense FFN sub-layers; the upcycling base."""

    def __init__(
        self,
        config: ModelConfig,
        token_embedding: Tensor,
        position_embedding: Tensor,
        blocks: List[TransformerBlock],
        lnf_gamma: Tensor,
        lnf_beta: Tensor,
        w_out: Tensor,
    ):
        self.config = config
        self.token_embedding = token_embedding
        self.position_embedding = position_embedding
        self.blocks = blocks
        self.lnf_gamma = lnf_gamma
        self.lnf_beta = lnf_beta
        self.w_out = w_out

    @classmethod
    def initialize(cls, config: ModelConfig, rng: Optional[np.random.Generator] = None) -> "DenseTransformer":
        """Random init from ``rng``; ``rng=None`` builds a zero-filled skeleton for loading."""
        std = config.init_std
        return cls(
            config=config,
            token_embedding=_normal(rng, (config.vocab_size, config.d_model), std),
            position_embedding=_normal(rng, (config.max_seq_len, config.d_model), std),
            blocks=[TransformerBlock.initialize(config, rng) for _ in range(config.n_layers)],
            lnf_gamma=Tensor(np.ones(config.d_model), requires_grad=True),
            lnf_beta=Tensor(np.zeros(config.d_model), requires_grad=True),
            w_out=_normal(rng, (config.d_model, config.vocab_size), std),
        )

    def parameters(self) -> Dict[str, Tensor]:
        params = {"embedding.token": self.token_embedding, "embedding.position": self.position_embedding}
        for index, block in enumerate(self.blocks):
            params.update(block.parameters(f"layers.{index}"))
        params.update({"ln_f.gamma": self.lnf_gamma, "ln_f.beta": self.lnf_beta, "output.w": self.w_out})
        return params

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.parameters().items() if t.requires_grad}

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()


class MoCEModel(DenseTransformer):
    """Upcycled transformer: every FFN sub-layer is wrapped by a MoCE layer."""

    def __init__(self, *args, moce_layers: List[MoCELayer], clustering: Optional[KMeansModel] = None, **kwargs):
        super().__init__(*args, **kwargs)
        self.moce_layers = moce_layers
        self.clustering = clustering

    @classmethod
    def skeleton(cls, config: ModelConfig) -> "MoCEModel":
        """Zero-filled model with the parameter layout of ``config``."""
        dense = DenseTransformer.initialize(config)
        rng = np.random.default_rng(0)
        layers = []
        for block in dense.blocks:
            groups = [
                ExpertGroup.initialize(config.d_model, config.adapter_rank, config.num_experts, rng, config.init_std)
                for _ in range(config.num_groups)
            ]
            general = (
                ExpertGroup.initialize(config.d_model, config.adapter_rank, config.num_experts, rng, config.init_std)
                if config.variant
                else None
            )
            layers.append(
                MoCELayer(
                    groups=groups,
                    base_ffn=block.ffn,
                    top_k=config.top_k,
                    mode=config.mode,
                    renormalize=config.renormalize,
                    activation=config.activation,
                    moe_scaling=config.moe_scaling,
                    general_group=general,
                )
            )
        return cls(
            config,
            dense.token_embedding,
            dense.position_embedding,
            dense.blocks,
            dense.lnf_gamma,
            dense.lnf_beta,
            dense.w_out,
            moce_layers=layers,
        )

    @property
    def num_groups(self) -> int:
        return self.moce_layers[0].num_groups

    def parameters(self) -> Dict[str, Tensor]:
        params = super().parameters()
        for index, layer in enumerate(self.moce_layers):
            params.update(layer.parameters(f"layers.{index}.moce"))
        return params

    def reset_counters(self) -> None:
        for layer in self.moce_layers:
            for expert in layer.all_experts():
                expert.reset_counters()

    def expert_forwards(self) -> int:
        """Token-expert forward passes since the last counter reset."""
        return sum(e.tokens_processed for layer in self.moce_layers for e in layer.all_experts())
