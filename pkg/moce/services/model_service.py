import logging
import math
from typing import Callable, List, Optional, Sequence

import numpy as np

from ..config.moce_config import MODEL_PARAMETERS
from ..engine import ops
from ..engine.tensor import Tensor
from ..models.kmeans import KMeansModel
from ..models.moce_layer import ExpertGroup, MoCELayer, RoutingRecord
from ..models.transformer import Attention, DenseTransformer, MoCEModel
from ..schemas.config import ModelConfig
from ..utils.exceptions import ConfigurationError, ContractError
from ..utils.seeding import INIT, substream
from ..utils.tokenizer import EOS_ID
from .routing_service import upcycled_ffn_forward

logger = logging.getLogger(__name__)

CAUSAL_FILL = -1e30

FFNFn = Callable[[int, Tensor], Tensor]


def _attention(block: Attention, u: Tensor) -> Tensor:
    n_tokens, d_model = u.shape
    head_dim = d_model // block.n_heads
    q, k, v = ops.matmul(u, block.w_q), ops.matmul(u, block.w_k), ops.matmul(u, block.w_v)
    causal = np.triu(np.full((n_tokens, n_tokens), CAUSAL_FILL), k=1)

    heads = []
    for h in range(block.n_heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        scores = ops.scale(ops.matmul(ops.slice_cols(q, lo, hi), ops.transpose(ops.slice_cols(k, lo, hi))), 1.0 / math.sqrt(head_dim))
        weights = ops.softmax(ops.add(scores, causal), axis=-1)
        heads.append(ops.matmul(weights, ops.slice_cols(v, lo, hi)))
    merged = heads[0] if len(heads) == 1 else ops.concat(heads, axis=1)
    return ops.matmul(merged, block.w_o)


def _check_tokens(model: DenseTransformer, token_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ContractError("Token sequence must be a non-empty 1-D list")
    if ids.size > model.config.max_seq_len:
        raise ContractError(f"Sequence length {ids.size} exceeds max_seq_len {model.config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise ContractError(f"Token id out of range for vocabulary of {model.config.vocab_size}")
    return ids


def _run(model: DenseTransformer, token_ids: Sequence[int], ffn: FFNFn) -> Tensor:
    ids = _check_tokens(model, token_ids)
    eps = model.config.layer_norm_eps
    h = ops.add(ops.take_rows(model.token_embedding, ids), ops.take_rows(model.position_embedding, np.arange(ids.size)))
    for index, block in enumerate(model.blocks):
        h = ops.add(h, _attention(block.attention, ops.layer_norm(h, block.ln1_gamma, block.ln1_beta, eps)))
        h = ops.add(h, ffn(index, ops.layer_norm(h, block.ln2_gamma, block.ln2_beta, eps)))
    return ops.matmul(ops.layer_norm(h, model.lnf_gamma, model.lnf_beta, eps), model.w_out)


def dense_forward(model: DenseTransformer, token_ids: Sequence[int]) -> Tensor:
    return _run(model, token_ids, lambda index, u: model.blocks[index].ffn(u))


def model_forward(
    model: MoCEModel,
    token_ids: Sequence[int],
    group_id: int,
    record: Optional[RoutingRecord] = None,
    sequence_id: int = 0,
) -> Tensor:
    """Causal forward pass; every MoCE layer routes this sequence to group ``group_id``."""
    if not 0 <= group_id < model.num_groups:
        raise ContractError(f"Group id {group_id} out of range for {model.num_groups} expert groups")

    def ffn(index: int, u: Tensor) -> Tensor:
        return upcycled_ffn_forward(model.moce_layers[index], u, group_id, record, index, sequence_id)

    return _run(model, token_ids, ffn)


def lm_loss(logits: Tensor, targets: Sequence[int], mask: Optional[Sequence[bool]] = None) -> Tensor:
    """Mean next-token negative log-likelihood over the supervised positions."""
    return ops.cross_entropy(logits, targets, mask)


def perplexity(loss: float) -> float:
    return float(math.exp(loss))


def set_trainable(model: MoCEModel, train_attention: bool = False, train_base: bool = False) -> None:
    """Freeze the upcycled base; adapters and routers train.

    ``train_attention`` unfreezes the attention weights, ``train_base`` every dense parameter
    (embeddings, attention, layer norms, base FFNs and the output head).
    """
    for name, tensor in model.parameters().items():
        tensor.requires_grad = train_base or ".moce." in name or (train_attention and ".attention." in name)


def upcycle_init(
    dense: DenseTransformer,
    config: ModelConfig,
    clustering: Optional[KMeansModel] = None,
) -> MoCEModel:
    """Copy the dense base into a MoCE model whose adapters start as exact no-ops."""
    if clustering is not None and clustering.k != config.num_groups:
        raise ConfigurationError(f"Clustering model has {clustering.k} clusters but config asks for {config.num_groups} groups")

    expected = DenseTransformer.initialize(config).parameters()
    actual = dense.parameters()
    for name, tensor in expected.items():
        if name not in actual:
            raise ConfigurationError(f"Dense base has no parameter '{name}'")
        if actual[name].shape != tensor.shape:
            raise ConfigurationError(f"Parameter '{name}' has shape {actual[name].shape}, config expects {tensor.shape}")
    extra = sorted(set(actual) - set(expected))
    if extra:
        raise ConfigurationError(f"Dense base has layers the config does not describe: {extra[0]}")

    copied = DenseTransformer.initialize(config)
    for name, tensor in copied.parameters().items():
        tensor.data[...] = actual[name].data

    rng = substream(config.seed, INIT)
    std = config.init_std
    layers: List[MoCELayer] = []
    for block in copied.blocks:
        groups = [
            ExpertGroup.initialize(config.d_model, config.adapter_rank, config.num_experts, rng, std)
            for _ in range(config.num_groups)
        ]
        general = (
            ExpertGroup.initialize(config.d_model, config.adapter_rank, config.num_experts, rng, std)
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

    model = MoCEModel(
        config,
        copied.token_embedding,
        copied.position_embedding,
        copied.blocks,
        copied.lnf_gamma,
        copied.lnf_beta,
        copied.w_out,
        moce_layers=layers,
        clustering=clustering,
    )
    set_trainable(model, config.train_attention, config.train_base)
    trainable = sum(t.size for t in model.trainable_parameters().values())
    logger.info(
        f"Upcycled {config.n_layers} layers into M={config.num_groups} groups x N={config.num_experts} experts "
        f"({trainable} trainable parameters)"
    )
    return model


def generate(
    model: MoCEModel,
    prompt_ids: Sequence[int],
    group_id: int,
    max_new_tokens: Optional[int] = None,
    stop_id: int = EOS_ID,
) -> List[int]:
    """Greedy decoding with the group held fixed for the whole continuation."""
    max_new_tokens = max_new_tokens or MODEL_PARAMETERS["evaluation"]["max_new_tokens"]
    ids = list(prompt_ids)
    generated: List[int] = []
    for _ in range(max_new_tokens):
        if len(ids) >= model.config.max_seq_len:
            break
        logits = model_forward(model, ids, group_id)
        next_id = int(np.argmax(logits.data[-1]))
        if next_id == stop_id:
            break
        generated.append(next_id)
        ids.append(next_id)
    return generated
