import logging
from typing import Optional

import numpy as np

from ..engine import ops
from ..engine.tensor import Tensor
from ..models.moce_layer import GENERAL, AdapterExpert, ExpertGroup, MoCELayer, RoutingRecord
from ..utils.exceptions import ConfigurationError, ContractError, ShapeError

logger = logging.getLogger(__name__)


def _as_rows(x: Tensor) -> Tensor:
    return ops.reshape(x, (1, x.shape[0])) if x.ndim == 1 else x


def router_logits(w_g: Tensor, x: Tensor) -> Tensor:
    """h = W_G^T x for one token (d_model,) or a T × d_model matrix of tokens."""
    if x.ndim not in (1, 2) or x.shape[-1] != w_g.shape[0]:
        raise ShapeError(f"router_logits: router {w_g.shape} cannot score input {x.shape}")
    logits = ops.matmul(_as_rows(x), w_g)
    return ops.reshape(logits, (w_g.shape[1],)) if x.ndim == 1 else logits


def gate(h: Tensor) -> Tensor:
    return ops.softmax(h, axis=-1)


def top_k_mask(weights: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row; ties go to the lowest index."""
    n = weights.shape[-1]
    if not 1 <= k <= n:
        raise ContractError(f"top_k must lie in [1, {n}], got {k}")
    order = np.argsort(-weights, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(weights.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def top_k_select(weights: Tensor, k: int) -> Tensor:
    """Keep the k largest weights at their original values and zero the rest.

    The mask is a constant in backward: gradients reach the selected weights only.
    """
    mask = top_k_mask(weights.data, k)
    return ops.mul(weights, mask.astype(np.float64))


def adapter_forward(
    adapter: AdapterExpert,
    base_out: Tensor,
    x: Optional[Tensor] = None,
    activation: str = "gelu",
) -> Tensor:
    """act(base_out W_down) W_up + x; with ``x=None`` only the adapter delta is returned."""
    rows = _as_rows(base_out)
    if rows.shape[1] != adapter.d_model:
        raise ShapeError(f"adapter_forward: input {base_out.shape} does not match adapter width {adapter.d_model}")
    if x is not None and x.shape != base_out.shape:
        raise ShapeError(f"adapter_forward: residual {x.shape} does not match base output {base_out.shape}")
    adapter.calls += 1
    adapter.tokens_processed += rows.shape[0]

    hidden = ops.activation(ops.matmul(rows, adapter.w_down), activation)
    out = ops.matmul(hidden, adapter.w_up)
    if base_out.ndim == 1:
        out = ops.reshape(out, base_out.shape)
    return out if x is None else ops.add(out, x)


def _route_group(
    group: ExpertGroup,
    x_tokens: Tensor,
    base_out: Tensor,
    k: int,
    layer: MoCELayer,
    record: Optional[RoutingRecord],
    router_name: str,
    group_id: int,
    layer_index: int,
    sequence_id: int,
    residual: bool,
) -> Tensor:
    n_tokens = x_tokens.shape[0]
    probs = gate(router_logits(group.router, x_tokens))
    mask = top_k_mask(probs.data, k)
    weights = ops.mul(probs, mask.astype(np.float64))
    if layer.renormalize:
        weights = ops.div(weights, ops.sum(weights, axis=1, keepdims=True))

    if record is not None:
        order = np.argsort(-probs.data, axis=1, kind="stable")[:, :k]
        selected = np.sort(order, axis=1)
        chosen_weights = np.take_along_axis(weights.data, selected, axis=1)
        record.log(layer_index, router_name, group_id, probs, selected, chosen_weights, sequence_id)

    y: Optional[Tensor] = None
    for index, expert in enumerate(group.experts):
        rows = np.flatnonzero(mask[:, index])
        if rows.size == 0:
            continue
        residual_rows = ops.take_rows(x_tokens, rows) if residual else None
        out = adapter_forward(expert, ops.take_rows(base_out, rows), residual_rows, layer.activation)
        weight = ops.take_rows(ops.slice_cols(weights, index, index + 1), rows)
        term = ops.scatter_rows(ops.mul(out, weight), rows, n_tokens)
        y = term if y is None else ops.add(y, term)
    return y


def _check_inputs(layer: MoCELayer, x_tokens: Tensor, group_id: int) -> None:
    if not 0 <= group_id < layer.num_groups:
        raise ContractError(f"Group id {group_id} out of range for {layer.num_groups} expert groups")
    if x_tokens.ndim != 2 or x_tokens.shape[1] != layer.groups[0].experts[0].d_model:
        raise ShapeError(f"Token matrix of shape {x_tokens.shape} does not match layer width")


def _effective_k(layer: MoCELayer) -> int:
    return layer.num_experts if layer.mode == "soft" else layer.top_k


def moce_layer_forward(
    layer: MoCELayer,
    x_tokens: Tensor,
    group_id: int,
    record: Optional[RoutingRecord] = None,
    base_out: Optional[Tensor] = None,
    layer_index: int = 0,
    sequence_id: int = 0,
    k: Optional[int] = None,
) -> Tensor:
    """y = sum_i TopK(R^a(x))_i * A_i(x) using group ``group_id`` only."""
    _check_inputs(layer, x_tokens, group_id)
    base_out = layer.base_ffn(x_tokens) if base_out is None else base_out
    return _route_group(
        layer.groups[group_id], x_tokens, base_out, layer.top_k if k is None else k, layer,
        record, f"group{group_id}", group_id, layer_index, sequence_id, residual=True,
    )


def soft_merge_forward(
    layer: MoCELayer,
    x_tokens: Tensor,
    group_id: int,
    record: Optional[RoutingRecord] = None,
    base_out: Optional[Tensor] = None,
    layer_index: int = 0,
    sequence_id: int = 0,
) -> Tensor:
    """Weighted combination of all N experts of the group (no truncation)."""
    return moce_layer_forward(layer, x_tokens, group_id, record, base_out, layer_index, sequence_id, k=layer.num_experts)


def general_forward(
    layer: MoCELayer,
    x_tokens: Tensor,
    record: Optional[RoutingRecord] = None,
    base_out: Optional[Tensor] = None,
    layer_index: int = 0,
    sequence_id: int = 0,
    residual: bool = True,
) -> Tensor:
    if layer.general_group is None:
        raise ConfigurationError("Layer has no general expert group")
    base_out = layer.base_ffn(x_tokens) if base_out is None else base_out
    return _route_group(
        layer.general_group, x_tokens, base_out, _effective_k(layer), layer,
        record, GENERAL, -1, layer_index, sequence_id, residual=residual,
    )


def moce_variant_forward(
    layer: MoCELayer,
    x_tokens: Tensor,
    group_id: int,
    record: Optional[RoutingRecord] = None,
    base_out: Optional[Tensor] = None,
    layer_index: int = 0,
    sequence_id: int = 0,
) -> Tensor:
    """Group path plus the general path shared by every sequence."""
    if layer.general_group is None:
        raise ConfigurationError("The general-expert variant needs a general expert group")
    _check_inputs(layer, x_tokens, group_id)
    base_out = layer.base_ffn(x_tokens) if base_out is None else base_out
    group_out = moce_layer_forward(
        layer, x_tokens, group_id, record, base_out, layer_index, sequence_id, k=_effective_k(layer)
    )
    return ops.add(group_out, general_forward(layer, x_tokens, record, base_out, layer_index, sequence_id))


def upcycled_ffn_forward(
    layer: MoCELayer,
    x_tokens: Tensor,
    group_id: int,
    record: Optional[RoutingRecord] = None,
    layer_index: int = 0,
    sequence_id: int = 0,
) -> Tensor:
    """FFN sub-layer of an upcycled block: E(x) + s * (weighted adapter deltas).

    Equals the dense FFN exactly while every W_up is zero, for any k.
    """
    _check_inputs(layer, x_tokens, group_id)
    base_out = layer.base_ffn(x_tokens)
    delta = _route_group(
        layer.groups[group_id], x_tokens, base_out, _effective_k(layer), layer,
        record, f"group{group_id}", group_id, layer_index, sequence_id, residual=False,
    )
    if layer.general_group is not None:
        general = general_forward(layer, x_tokens, record, base_out, layer_index, sequence_id, residual=False)
        delta = ops.add(delta, general)
    return ops.add(base_out, ops.scale(delta, layer.moe_scaling))


def load_balance_loss(record: RoutingRecord, num_experts: Optional[int] = None, coefficient: float = 1.0) -> Tensor:
    """coefficient * sum over routers of N * sum_i f_i * P_i.

    f_i is the share of tokens whose untruncated top-1 expert is i (a constant);
    P_i is the mean gate probability of expert i and carries the gradient.
    """
    total: Optional[Tensor] = None
    for key in record.router_keys():
        trace = record.traces[key]
        if trace.tokens == 0 or not trace.gates:
            continue
        if num_experts is not None and trace.num_experts != num_experts:
            raise ShapeError(f"Router {key} has {trace.num_experts} experts, expected {num_experts}")
        probs = trace.gates[0] if len(trace.gates) == 1 else ops.concat(trace.gates, axis=0)
        mean_probs = ops.mean(probs, axis=0)
        fractions = record.load_fractions(key)
        term = ops.scale(ops.sum(ops.mul(mean_probs, fractions)), trace.num_experts)
        total = term if total is None else ops.add(total, term)

    if total is None:
        logger.warning("Routing record holds no routed tokens; load-balancing loss is 0")
        return Tensor(0.0)
    return ops.scale(total, coefficient)
