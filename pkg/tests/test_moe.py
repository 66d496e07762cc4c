import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmoe import autograd as ag
from mmoe.autograd import Tape, Tensor
from mmoe.model import Decoder, LayerRouting, decoder_forward
from mmoe.moe import (DenseFFN, ExpertCounter, PartitionError, check_partition, convert_to_moe,
                      dense_equivalence_check, gate_scores, importance_cv2, load_balance_stats,
                      merge_experts, moe_layer_forward, partition_ffn, select_top_k,
                      swiglu_ffn_forward)

from conftest import randomize, tiny_config


def _ffn(d=8, f=16, seed=0):
    rng = np.random.default_rng(seed)
    return DenseFFN(Tensor(rng.normal(size=(f, d))), Tensor(rng.normal(size=(f, d))),
                    Tensor(rng.normal(size=(d, f))))


@given(st.sampled_from([2, 4, 8, 16]), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_partition_is_disjoint_equal_and_complete(n, seed):
    experts = partition_ffn(_ffn(f=32), n, seed)
    check_partition(experts, 32)
    idx = np.concatenate([e.neuron_indices for e in experts])
    assert sorted(idx.tolist()) == list(range(32))
    assert {len(e.neuron_indices) for e in experts} == {32 // n}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_summed_experts_reproduce_parent(seed):
    ffn = _ffn(seed=seed)
    x = np.random.default_rng(seed + 10).normal(size=(5, 8))
    assert dense_equivalence_check(ffn, partition_ffn(ffn, 4, seed), x) <= 1e-12


def test_merge_inverts_partition():
    ffn = _ffn()
    merged = merge_experts(partition_ffn(ffn, 4, 3), 16)
    for a, b in [(merged.w_gate, ffn.w_gate), (merged.w_up, ffn.w_up), (merged.w_down, ffn.w_down)]:
        assert np.array_equal(a.data, b.data)


def test_nondividing_expert_count_rejected():
    with pytest.raises(PartitionError, match="divide"):
        partition_ffn(_ffn(f=16), 3, 0)


def test_partition_checker_catches_bad_partitions():
    experts = partition_ffn(_ffn(f=16), 4, 0)
    experts[1].neuron_indices = experts[0].neuron_indices.copy()
    with pytest.raises(PartitionError):
        check_partition(experts, 16)


def test_top_k_separated_scores():
    s = np.array([[0.1, 0.5, 0.3, 0.1]])
    d = select_top_k(s, 2)
    assert d.experts.tolist() == [[1, 2]]
    np.testing.assert_allclose(d.gates, [[0.5, 0.3]])


def test_top_k_ties_go_to_lower_index():
    d = select_top_k(np.full((1, 4), 0.25), 2)
    assert d.experts.tolist() == [[0, 1]]


@given(st.integers(0, 10_000), st.integers(1, 8))
@settings(max_examples=50, deadline=None)
def test_top_k_selects_largest_without_renormalization(seed, k):
    s = np.random.default_rng(seed).dirichlet(np.ones(8), size=3)
    d = select_top_k(s, k)
    for row, ex, g in zip(s, d.experts, d.gates):
        assert len(set(ex.tolist())) == k
        assert np.min(g) >= np.max(np.delete(row, ex), initial=0.0) - 1e-15
        np.testing.assert_array_equal(g, row[ex])
    assert np.all(d.gates.sum(axis=1) <= 1.0 + 1e-12)


def test_renormalized_gates_sum_to_one():
    s = np.random.default_rng(0).dirichlet(np.ones(8), size=4)
    np.testing.assert_allclose(select_top_k(s, 3, renormalize=True).gates.sum(axis=1), 1.0)


def test_top_k_bounds():
    with pytest.raises(ValueError):
        select_top_k(np.ones((1, 4)) / 4, 5)


def test_zero_router_at_eval_gives_scaled_dense_output(tiny_dense):
    moe = convert_to_moe(tiny_dense, n_experts=4, top_k=2, seed=0)
    x = np.random.default_rng(0).normal(size=(6, 16))
    layer = moe.moe_layer(0)
    y, dec = moe_layer_forward(layer, Tensor(x))
    assert dec.experts.tolist() == [[0, 1]] * 6
    np.testing.assert_allclose(dec.gates, 0.25)
    expect = sum(0.25 * swiglu_ffn_forward(layer.experts[e], Tensor(x)).data for e in (0, 1))
    np.testing.assert_allclose(y.data, expect, atol=1e-14)


def test_all_experts_unit_gate_equals_dense(tiny_dense):
    moe = convert_to_moe(tiny_dense, n_experts=4, top_k=2, seed=0)
    x = np.random.default_rng(1).normal(size=(5, 16))
    y, _ = moe_layer_forward(moe.moe_layer(1), Tensor(x), diagnostic_all=True)
    dense = swiglu_ffn_forward(tiny_dense.ffn(1), Tensor(x)).data
    assert np.max(np.abs(y.data - dense)) <= 1e-10


def test_full_model_all_experts_matches_dense_logits(tiny_dense):
    moe = convert_to_moe(tiny_dense, n_experts=4, top_k=2, seed=0)
    ids = np.array([[1, 5, 9, 3, 12]])
    a = decoder_forward(moe, ids, diagnostic_all_experts=True).data
    b = decoder_forward(tiny_dense, ids).data
    assert np.max(np.abs(a - b)) <= 1e-10


def test_expert_counter_reports_sparse_work(tiny_moe):
    x = Tensor(np.random.default_rng(0).normal(size=(10, 16)))
    c = ExpertCounter()
    moe_layer_forward(tiny_moe.moe_layer(0), x, counter=c)
    assert c.token_evals == 10 * 2
    assert sum(c.by_expert.values()) == 20


def test_training_noise_needs_rng_and_is_seeded(tiny_moe):
    router = tiny_moe.moe_layer(0).router
    x = Tensor(np.random.default_rng(0).normal(size=(4, 16)))
    with pytest.raises(ValueError):
        gate_scores(router, x, train=True)
    a = gate_scores(router, x, train=True, rng=np.random.default_rng(3)).data
    b = gate_scores(router, x, train=True, rng=np.random.default_rng(3)).data
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a.sum(axis=1), 1.0)


def test_routing_trace_collected_only_for_valid(tiny_moe):
    ids = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    valid = np.array([[1, 1, 0, 0], [1, 1, 1, 0]], bool)
    routes: list[LayerRouting] = []
    decoder_forward(tiny_moe, ids, routing=routes, valid=valid)
    assert len(routes) == 2
    assert routes[0].token_index.tolist() == [0, 1, 4, 5, 6]


def test_moe_gradients_match_finite_differences():
    dense = Decoder.init(tiny_config(), seed=2)
    moe = randomize(convert_to_moe(dense, n_experts=4, top_k=2, seed=1), 5, scale=0.5)
    for t in moe.params.values():
        t.requires_grad = True
    ids = np.random.default_rng(0).integers(0, 20, size=(2, 6))

    def loss():
        return ag.cross_entropy_next_token(decoder_forward(moe, ids[:, :-1]), ids[:, 1:])

    def grad_fn():
        with Tape() as tape:
            tape.backward(loss())

    names = [n for n in moe.params if "noise" not in n]
    rep = ag.finite_difference_check(lambda: float(loss().data), {n: moe.params[n] for n in names},
                                     grad_fn=grad_fn)
    assert rep.passed, {k: v for k, v in rep.max_rel_error.items() if v > rep.tolerance}


def test_renormalized_gate_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    dense = Decoder.init(tiny_config(n_layers=1), seed=0)
    moe = convert_to_moe(dense, n_experts=4, top_k=2, seed=0, renormalize_gates=True)
    randomize(moe, 1, scale=0.8)
    router = moe.params["layer.0.moe.router"]
    router.requires_grad = True
    x = Tensor(rng.normal(size=(6, 16)))
    w = rng.normal(size=(6, 16))

    def loss():
        y, _ = moe_layer_forward(moe.moe_layer(0), x)
        return ag.sum_all(ag.mul(y, Tensor(w)))

    def grad_fn():
        with Tape() as tape:
            tape.backward(loss())

    rep = ag.finite_difference_check(lambda: float(loss().data), {"router": router}, grad_fn=grad_fn,
                                     step=1e-6)
    assert rep.passed, rep.worst


def test_importance_cv2_gradient():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(7, 4)), requires_grad=True)
    experts = select_top_k(ag.softmax_rows(logits).data, 2).experts

    def loss():
        return importance_cv2(ag.softmax_rows(logits), experts)

    def grad_fn():
        with Tape() as tape:
            tape.backward(loss())

    rep = ag.finite_difference_check(lambda: float(loss().data), {"logits": logits}, grad_fn=grad_fn)
    assert rep.passed, rep.worst


def test_load_balance_stats():
    dec = select_top_k(np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]]), 1)
    frac, cov = load_balance_stats(dec, 3)
    np.testing.assert_allclose(frac, [0.5, 0.5, 0.0])
    assert cov == pytest.approx(np.std([0.5, 0.5, 0]) / np.mean([0.5, 0.5, 0]))
    with pytest.raises(ValueError):
        load_balance_stats([], 3)


def test_convert_refuses_twice_and_keeps_parent(tiny_dense):
    before = {k: v.data.copy() for k, v in tiny_dense.params.items()}
    moe = convert_to_moe(tiny_dense, n_experts=4, top_k=2)
    with pytest.raises(ValueError):
        convert_to_moe(moe, 4, 2)
    for k, v in tiny_dense.params.items():
        assert np.array_equal(v.data, before[k])
    assert all(np.all(moe.params[f"layer.{i}.moe.router"].data == 0) for i in range(2))
