import numpy as np
import pytest
from scipy.special import erf

from moce.engine import ComputationTape, Tensor, ops
from moce.engine.gradcheck import check_gradient, check_parameter_gradients
from moce.models.feed_forward import FeedForward
from moce.models.moce_layer import AdapterExpert, ExpertGroup, MoCELayer, RoutingRecord
from moce.services.routing_service import (
    adapter_forward,
    gate,
    general_forward,
    load_balance_loss,
    moce_layer_forward,
    moce_variant_forward,
    router_logits,
    soft_merge_forward,
    top_k_mask,
    top_k_select,
    upcycled_ffn_forward,
)
from moce.utils.exceptions import ConfigurationError, ContractError, ShapeError


def make_layer(rng, d_model=4, num_groups=2, num_experts=2, rank=3, top_k=2, mode="topk",
               general=False, random_up=False, renormalize=False):
    base = FeedForward.initialize(d_model, 2 * d_model, rng, 0.5)
    groups = [ExpertGroup.initialize(d_model, rank, num_experts, rng, 0.5) for _ in range(num_groups)]
    general_group = ExpertGroup.initialize(d_model, rank, num_experts, rng, 0.5) if general else None
    layer = MoCELayer(groups=groups, base_ffn=base, top_k=top_k, mode=mode,
                      renormalize=renormalize, general_group=general_group)
    if random_up:
        for expert in layer.all_experts():
            expert.w_up.data[:] = rng.normal(0.0, 0.5, expert.w_up.shape)
    return layer


def record_from_gates(rows, layer=0, router="group0"):
    gates = Tensor(np.asarray(rows, dtype=np.float64))
    record = RoutingRecord()
    selected = np.argmax(gates.data, axis=1)[:, None]
    record.log(layer, router, 0, gates, selected, np.take_along_axis(gates.data, selected, axis=1))
    return record


def test_router_logits_identity_and_zero():
    x = Tensor([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(router_logits(Tensor(np.eye(4)), x).data, x.data)
    logits = router_logits(Tensor(np.zeros((4, 3))), x)
    np.testing.assert_array_equal(logits.data, np.zeros(3))
    np.testing.assert_allclose(gate(logits).data, np.full(3, 1.0 / 3.0), atol=1e-15)


def test_router_logits_shape_mismatch():
    with pytest.raises(ShapeError):
        router_logits(Tensor(np.zeros((4, 3))), Tensor(np.ones(5)))


def test_gate_rows_sum_to_one(rng):
    probs = gate(router_logits(Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=(7, 4))))).data
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(7), atol=1e-12)
    assert np.all(probs >= 0)


def test_top_k_select_keeps_largest_with_low_index_ties():
    selected = top_k_select(Tensor([0.1, 0.5, 0.2, 0.2]), 2)
    np.testing.assert_array_equal(selected.data, [0.0, 0.5, 0.2, 0.0])
    np.testing.assert_array_equal(top_k_select(Tensor([0.1, 0.5, 0.2, 0.2]), 4).data, [0.1, 0.5, 0.2, 0.2])


@pytest.mark.parametrize("k", [0, 5])
def test_top_k_out_of_range(k):
    with pytest.raises(ContractError):
        top_k_mask(np.array([0.1, 0.5, 0.2, 0.2]), k)


def test_fresh_adapter_is_identity(rng):
    adapter = AdapterExpert.initialize(4, 2, rng, 0.5)
    x = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(adapter_forward(adapter, x, x).data, x.data)
    assert adapter.calls == 1
    assert adapter.tokens_processed == 3


def test_adapter_rejects_wrong_width(rng):
    adapter = AdapterExpert.initialize(4, 2, rng, 0.5)
    with pytest.raises(ShapeError):
        adapter_forward(adapter, Tensor(np.ones((2, 5))))


def test_layer_with_zero_up_projections_returns_input(rng):
    layer = make_layer(rng, top_k=2)
    x = Tensor(rng.normal(size=(5, 4)))
    np.testing.assert_allclose(moce_layer_forward(layer, x, 1).data, x.data, atol=1e-12)


def test_upcycled_ffn_equals_base_at_init(rng):
    for k in (1, 2):
        layer = make_layer(rng, top_k=k, general=True)
        x = Tensor(rng.normal(size=(5, 4)))
        np.testing.assert_array_equal(upcycled_ffn_forward(layer, x, 0).data, layer.base_ffn(x).data)


def test_soft_merge_equals_top_n(rng):
    layer = make_layer(rng, num_experts=3, top_k=1, random_up=True)
    x = Tensor(rng.normal(size=(4, 4)))
    np.testing.assert_array_equal(
        soft_merge_forward(layer, x, 0).data,
        moce_layer_forward(layer, x, 0, k=3).data,
    )


def test_variant_adds_group_and_general_paths(rng):
    layer = make_layer(rng, top_k=1, general=True, random_up=True)
    x = Tensor(rng.normal(size=(4, 4)))
    expected = moce_layer_forward(layer, x, 1).data + general_forward(layer, x).data
    np.testing.assert_allclose(moce_variant_forward(layer, x, 1).data, expected, atol=1e-12)


def test_general_path_needs_a_general_group(rng):
    layer = make_layer(rng)
    x = Tensor(rng.normal(size=(2, 4)))
    with pytest.raises(ConfigurationError):
        moce_variant_forward(layer, x, 0)
    with pytest.raises(ConfigurationError):
        general_forward(layer, x)


@pytest.mark.parametrize("group_id", [-1, 2])
def test_group_id_out_of_range(rng, group_id):
    layer = make_layer(rng)
    with pytest.raises(ContractError):
        moce_layer_forward(layer, Tensor(rng.normal(size=(2, 4))), group_id)


def test_groups_must_agree_on_shape(rng):
    with pytest.raises(ConfigurationError):
        MoCELayer(
            groups=[ExpertGroup.initialize(4, 2, 2, rng, 0.1), ExpertGroup.initialize(4, 2, 3, rng, 0.1)],
            base_ffn=FeedForward.initialize(4, 8, rng, 0.1),
        )


def test_only_top_k_experts_run(rng):
    layer = make_layer(rng, num_experts=4, top_k=1)
    x = Tensor(rng.normal(size=(6, 4)))
    moce_layer_forward(layer, x, 0)
    assert sum(e.tokens_processed for e in layer.groups[0].experts) == 6
    assert sum(e.tokens_processed for e in layer.groups[1].experts) == 0


def test_gradients_stay_inside_the_routed_group(rng):
    layer = make_layer(rng, random_up=True)
    x = Tensor(rng.normal(size=(3, 4)))
    with ComputationTape() as tape:
        loss = ops.sum(upcycled_ffn_forward(layer, x, 0))
    tape.backward(loss)
    assert layer.groups[0].router.grad is not None
    assert layer.groups[0].experts[0].w_up.grad is not None
    for tensor in layer.groups[1].parameters("g1").values():
        assert tensor.grad is None or not np.any(tensor.grad)


def test_layer_parameter_gradients(rng):
    layer = make_layer(rng, d_model=4, num_groups=2, num_experts=2, top_k=2, random_up=True)
    x = Tensor(rng.normal(size=(3, 4)))
    weights = Tensor(rng.normal(size=(3, 4)))
    params = layer.groups[1].parameters("groups.1")
    errors = check_parameter_gradients(lambda: ops.sum(ops.mul(upcycled_ffn_forward(layer, x, 1), weights)), params)
    assert set(errors) == set(params)
    assert max(errors.values()) < 1e-5


def test_renormalized_weights_sum_to_one(rng):
    layer = make_layer(rng, num_experts=4, top_k=2, renormalize=True)
    record = RoutingRecord()
    moce_layer_forward(layer, Tensor(rng.normal(size=(5, 4))), 0, record)
    np.testing.assert_allclose(record.entries[0].weights.sum(axis=1), np.ones(5), atol=1e-12)


def test_balance_loss_uniform_rotated_rows():
    rows = [np.roll([0.4, 0.2, 0.2, 0.2], shift) for shift in range(4)]
    assert load_balance_loss(record_from_gates(rows)).item() == pytest.approx(1.0, abs=1e-12)


def test_balance_loss_collapse():
    record = record_from_gates([[0.97, 0.01, 0.01, 0.01]] * 8)
    assert load_balance_loss(record).item() == pytest.approx(4 * 0.97, abs=1e-12)
    assert load_balance_loss(record, coefficient=0.5).item() == pytest.approx(2 * 0.97, abs=1e-12)


def test_balance_loss_single_expert():
    assert load_balance_loss(record_from_gates([[1.0], [1.0]])).item() == pytest.approx(1.0)


def test_balance_loss_of_empty_record_is_zero():
    assert load_balance_loss(RoutingRecord()).item() == 0.0


def test_balance_loss_checks_expert_count():
    with pytest.raises(ShapeError):
        load_balance_loss(record_from_gates([[0.5, 0.5]]), num_experts=4)


def test_balance_loss_sums_over_routers():
    record = record_from_gates([[0.97, 0.01, 0.01, 0.01]] * 2)
    record.extend(record_from_gates([[0.97, 0.01, 0.01, 0.01]] * 2, layer=1))
    assert load_balance_loss(record).item() == pytest.approx(2 * 4 * 0.97, abs=1e-12)


def test_balance_loss_gradient_matches_finite_differences():
    logits = np.array([[2.0, 0.1, -0.3], [0.2, 1.5, 0.0], [-1.0, 0.4, 2.2], [1.8, 0.3, 0.1]])

    def loss(h):
        record = RoutingRecord()
        probs = gate(h)
        record.log(0, "group0", 0, probs, np.zeros((4, 1), dtype=int), np.zeros((4, 1)))
        return load_balance_loss(record)

    assert check_gradient(loss, logits) < 1e-6


def test_routing_csv_export(rng, tmp_path):
    layer = make_layer(rng, top_k=2, general=True)
    record = RoutingRecord()
    x = Tensor(rng.normal(size=(3, 4)))
    upcycled_ffn_forward(layer, x, 1, record)
    rows = record.to_csv(tmp_path / "routing.csv")
    lines = (tmp_path / "routing.csv").read_text().splitlines()
    assert lines[0] == "token_idx,group,expert,weight"
    assert rows == len(lines) - 1 == 2 * 3 * 2
    groups = {line.split(",")[1] for line in lines[1:]}
    assert groups == {"1", "general"}


def test_record_extend_rebases_token_indices(rng):
    layer = make_layer(rng, top_k=1)
    first, second = RoutingRecord(), RoutingRecord()
    moce_layer_forward(layer, Tensor(rng.normal(size=(3, 4))), 0, first)
    moce_layer_forward(layer, Tensor(rng.normal(size=(2, 4))), 1, second, sequence_id=1)
    first.extend(second)
    assert [e.token_start for e in first.entries] == [0, 3]
    assert first.total_tokens() == 5
    assert first.group_token_counts(2) == [3, 2]
    fractions = first.load_fraction_report()
    assert set(fractions) == {"layer0/group0", "layer0/group1"}
    for values in fractions.values():
        assert sum(values) == pytest.approx(1.0)


def gelu(v):
    return 0.5 * v * (1.0 + erf(v / np.sqrt(2.0)))


def weighted_expert_sum(layer, x, group_id, experts=None):
    """sum_i g_i * (gelu(E(x) W_down_i) W_up_i + x) over ``experts`` (default: all)."""
    group = layer.groups[group_id]
    logits = x @ group.router.data
    gates = np.exp(logits - logits.max(axis=1, keepdims=True))
    gates /= gates.sum(axis=1, keepdims=True)
    base = layer.base_ffn(Tensor(x)).data
    out = np.zeros_like(x)
    for i in experts if experts is not None else range(group.num_experts):
        expert = group.experts[i]
        out += gates[:, [i]] * (gelu(base @ expert.w_down.data) @ expert.w_up.data + x)
    return out


def test_two_expert_layer_matches_hand_computation(rng):
    layer = make_layer(rng, d_model=2, num_groups=1, num_experts=2, rank=1, top_k=2)
    group = layer.groups[0]
    group.router.data[:] = [[1.0, -1.0], [0.5, 0.0]]
    group.experts[0].w_down.data[:] = [[0.7], [-0.4]]
    group.experts[0].w_up.data[:] = [[1.5, -2.0]]
    group.experts[1].w_down.data[:] = [[-0.3], [0.9]]
    group.experts[1].w_up.data[:] = [[0.25, 0.5]]
    x = np.array([[1.0, 2.0], [-0.5, 0.3], [0.0, 0.0]])
    np.testing.assert_allclose(moce_layer_forward(layer, Tensor(x), 0).data, weighted_expert_sum(layer, x, 0), atol=1e-12)


def test_soft_merge_matches_direct_weighted_sum(rng):
    layer = make_layer(rng, num_experts=3, top_k=1, random_up=True)
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(soft_merge_forward(layer, Tensor(x), 1).data, weighted_expert_sum(layer, x, 1), atol=1e-12)


def test_top_one_keeps_the_untruncated_weight_of_the_winner(rng):
    layer = make_layer(rng, num_experts=3, top_k=1, random_up=True)
    x = rng.normal(size=(4, 4))
    out = moce_layer_forward(layer, Tensor(x), 0).data
    logits = x @ layer.groups[0].router.data
    for t, winner in enumerate(np.argmax(logits, axis=1)):
        np.testing.assert_allclose(out[t], weighted_expert_sum(layer, x[t:t + 1], 0, [winner])[0], atol=1e-12)


def test_variant_with_silent_general_group_adds_the_input(rng):
    layer = make_layer(rng, top_k=2, general=True, random_up=True)
    for expert in layer.general_group.experts:
        expert.w_up.data[:] = 0.0
    x = Tensor(rng.normal(size=(4, 4)))
    expected = moce_layer_forward(layer, x, 0).data + x.data
    np.testing.assert_allclose(moce_variant_forward(layer, x, 0).data, expected, atol=1e-12)


@pytest.mark.parametrize(
    "options",
    [
        {"num_experts": 3, "top_k": 1},
        {"num_experts": 4, "top_k": 2},
        {"num_experts": 3, "top_k": 1, "mode": "soft"},
        {"num_experts": 3, "top_k": 2, "renormalize": True},
        {"num_experts": 2, "top_k": 1, "general": True},
    ],
)
def test_routed_layer_parameter_gradients(rng, options):
    layer = make_layer(rng, random_up=True, **options)
    x = Tensor(rng.normal(size=(4, 4)))
    weights = Tensor(rng.normal(size=(4, 4)))
    params = layer.groups[0].parameters("groups.0")
    if layer.general_group is not None:
        params.update(layer.general_group.parameters("general"))
    errors = check_parameter_gradients(lambda: ops.sum(ops.mul(upcycled_ffn_forward(layer, x, 0), weights)), params)
    assert max(errors.values()) < 1e-5
