import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memseg import diffnum as dn
from memseg import memory as mem
from memseg.diffnum import DegenerateVectorError, Tensor
from memseg.gradcheck import check_memory

E = math.e


def bank(*rows, gamma=0.1):
    return mem.MemoryBank(np.array(rows, dtype=float), gamma=gamma)


def random_instance(rng, N, K, C):
    F = rng.standard_normal((N, C))
    return F, mem.MemoryBank.random(K, C, rng)


# -- address / read ----------------------------------------------------------


def test_address_hand_example():
    a = mem.address(Tensor([[1.0, 0.0]]), bank([1, 0], [0, 1]))
    np.testing.assert_allclose(a.sim.data, [[1.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(a.weights.data, [[E / (E + 1), 1 / (E + 1)]], rtol=1e-14)
    np.testing.assert_allclose(a.weights.data, [[0.7311, 0.2689]], atol=5e-5)


def test_address_scale_invariant():
    rng = np.random.default_rng(0)
    F, M = random_instance(rng, 5, 3, 4)
    a = mem.address(F, M)
    b = mem.address(F * np.array([[3.0], [0.1], [1.0], [7.5], [2.0]]), M)
    np.testing.assert_allclose(a.weights.data, b.weights.data, rtol=1e-13)


def test_identical_items_give_uniform_weights():
    rng = np.random.default_rng(1)
    M = bank(*([[0.0, 0.6, 0.8]] * 4))
    W = mem.address(rng.standard_normal((6, 3)), M).weights.data
    np.testing.assert_allclose(W, 0.25, atol=1e-15)


def test_read_hand_example():
    G, a = mem.read(Tensor([[1.0, 0.0]]), bank([1, 0], [0, 1], gamma=0.1))
    recalled = a.weights.data @ np.eye(2)
    np.testing.assert_allclose(recalled, [[0.7311, 0.2689]], atol=5e-5)
    np.testing.assert_allclose(G.data, [[1.0731, 0.0269]], atol=5e-5)
    np.testing.assert_allclose(G.data, [[1 + 0.1 * E / (E + 1), 0.1 / (E + 1)]], rtol=1e-14)


def test_read_gamma_zero_is_identity():
    rng = np.random.default_rng(2)
    F, M = random_instance(rng, 7, 3, 4)
    M.gamma.data[...] = 0.0
    G, _ = mem.read(F, M)
    np.testing.assert_array_equal(G.data, F)


def test_read_single_item_broadcasts_it():
    # K = 1 is below the bank minimum; exercise the read arithmetic directly
    M = mem.MemoryBank(np.array([[0.6, 0.8], [0.6, 0.8]]), gamma=0.5)
    F = np.array([[1.0, 2.0], [-3.0, 0.5]])
    G, _ = mem.read(F, M)
    np.testing.assert_allclose(G.data, F + 0.5 * np.array([0.6, 0.8]), rtol=1e-14)


def test_bank_needs_two_items():
    with pytest.raises(ValueError, match="K >= 2"):
        mem.MemoryBank(np.ones((1, 3)))


def test_zero_feature_rejected_with_row():
    with pytest.raises(DegenerateVectorError, match="row 1"):
        mem.address(np.array([[1.0, 0.0], [0.0, 0.0]]), bank([1, 0], [0, 1]))


def test_items_are_constants_by_default():
    rng = np.random.default_rng(3)
    F = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    M = mem.MemoryBank.random(3, 3, rng)
    G, _ = mem.read(F, M)
    dn.backward(dn.sum(G))
    assert not M.items.requires_grad and M.items.grad is None
    assert np.any(F.grad != 0) and M.gamma.grad != 0


# -- partition / update weights / write --------------------------------------


def test_partition_clear_argmax():
    A = mem.partition(np.array([[0.9, 0.1]]))
    assert [a.tolist() for a in A.sets] == [[0], []]


def test_partition_ties_go_to_lowest_index():
    A = mem.partition(np.array([[0.3, 0.3, 0.3]]))
    assert [a.tolist() for a in A.sets] == [[0], [], []]


def test_partition_matches_row_scan():
    rng = np.random.default_rng(4)
    S = rng.uniform(-1, 1, (20, 4))
    A = mem.partition(S)
    for i in range(20):
        best = 0
        for k in range(1, 4):
            if S[i, k] > S[i, best]:
                best = k
        assert i in A.sets[best]
    assert sorted(np.concatenate(A.sets).tolist()) == list(range(20))


def test_update_weights_singleton_is_one():
    F = np.array([[5.0, 1.0], [-1.0, 4.0]])
    M = bank([1, 0], [0, 1])
    A = mem.partition(mem.address(F, M).sim)
    assert [a.tolist() for a in A.sets] == [[0], [1]]
    assert [w.tolist() for w in mem.update_weights(F, M, A)] == [[1.0], [1.0]]


def test_update_weights_equal_pair():
    F = np.array([[1.0, 0.2], [0.0, 1.0], [1.0, 0.2]])
    M = bank([1, 0], [0, 1])
    A = mem.partition(mem.address(F, M).sim)
    assert A.sets[0].tolist() == [0, 2]
    assert mem.update_weights(F, M, A)[0].tolist() == [1.0, 1.0]


def test_update_weights_hand_instance():
    # f1=(1,0) f2=(0.6,0.8) f3=(0,1); items e1, e2
    # item 2 owns {f2, f3}; its weights exp(0.8)/Z and exp(1)/Z renormalize to (e^-0.2, 1)
    F = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    M = bank([1, 0], [0, 1])
    A = mem.partition(mem.address(F, M).sim)
    assert [a.tolist() for a in A.sets] == [[0], [1, 2]]
    vt = mem.update_weights(F, M, A)
    np.testing.assert_allclose(vt[0], [1.0])
    np.testing.assert_allclose(vt[1], [0.8187, 1.0], atol=5e-5)
    # step-by-step oracle: softmax over all three features, then divide by max inside the set
    s2 = [F[i, 1] for i in range(3)]
    z = sum(math.exp(s) for s in s2)
    v2 = [math.exp(s) / z for s in s2]
    np.testing.assert_allclose(vt[1], [v2[1] / max(v2[1], v2[2]), v2[2] / max(v2[1], v2[2])], rtol=1e-14)


def test_write_hand_example():
    M = bank([1, 0], [0, 1])
    mem.write(np.array([[2.0, 0.0]]), M)
    np.testing.assert_allclose(M.items.data, [[1.0, 0.0], [0.0, 1.0]], atol=1e-15)


def test_write_parallel_feature_keeps_direction():
    M = bank([0.6, 0.8], [1, 0])
    mem.write(np.array([[1.2, 1.6]]), M)
    np.testing.assert_allclose(M.items.data, [[0.6, 0.8], [1.0, 0.0]], atol=1e-12)


def test_write_moves_item_toward_features():
    M = bank([1, 0], [0, 1])
    F = np.array([[1.0, 0.5]])
    mem.write(F, M)
    np.testing.assert_allclose(M.items.data[0], np.array([2.0, 0.5]) / math.hypot(2.0, 0.5), rtol=1e-14)
    np.testing.assert_array_equal(M.items.data[1], [0.0, 1.0])


def test_write_detects_cancellation():
    # duplicate items: the antiparallel feature ties, goes to item 0 with weight 1 and cancels it
    M = bank([1, 0], [1, 0])
    with pytest.raises(DegenerateVectorError, match="item 0"):
        mem.write(np.array([[-1.0, 0.0]]), M)


def test_write_does_not_touch_graph():
    rng = np.random.default_rng(5)
    F, M = random_instance(rng, 6, 3, 4)
    dn.current_graph().clear()
    mem.write(Tensor(F, requires_grad=True), M)
    assert len(dn.current_graph()) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(2, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_write_keeps_unit_rows_and_partitions(N, K, C, seed):
    rng = np.random.default_rng(seed)
    F, M = random_instance(rng, N, K, C)
    A = mem.partition(mem.address(F, M).sim)
    joined = np.sort(np.concatenate(A.sets))
    np.testing.assert_array_equal(joined, np.arange(N))
    mem.write(F, M)
    np.testing.assert_allclose(np.linalg.norm(M.items.data, axis=1), 1.0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 16), st.integers(2, 8), st.integers(1, 6), st.integers(0, 2**31))
def test_addressing_invariants(N, K, C, seed):
    rng = np.random.default_rng(seed)
    F, M = random_instance(rng, N, K, C)
    a = mem.address(F, M)
    S, W = a.sim.data, a.weights.data
    assert np.all(np.abs(S) <= 1 + 1e-12)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(W > 0)
    assert np.all(W.max(axis=1) / W.min(axis=1) <= E**2 * (1 + 1e-12))


def test_write_fixed_point():
    rng = np.random.default_rng(6)
    M = mem.MemoryBank.random(4, 5, rng)
    before = M.items.data.copy()
    mem.write(3.7 * before[2:3], M)
    np.testing.assert_allclose(M.items.data, before, atol=1e-12)


# -- triplet loss ------------------------------------------------------------


def test_triplet_inactive_when_margin_met():
    M = bank([1, 0], [0, 1])
    F = Tensor([[1.0, 0.0]])
    loss = mem.triplet_loss(F, M, mem.address(F, M).weights, alpha=1.0)
    assert loss.item() == 0.0  # 0 - sqrt(2) + 1 < 0


def test_triplet_active_hinge():
    # weights rank (0.6, 0.8) first: |f - m_p| = sqrt(0.8), |f - m_q| = 0
    M = bank([0.6, 0.8], [1, 0])
    loss = mem.triplet_loss(Tensor([[1.0, 0.0]]), M, np.array([[0.6, 0.4]]), alpha=1.0)
    assert loss.item() == pytest.approx(math.sqrt(0.8) + 1.0, rel=1e-14)


def test_triplet_boundary_with_zero_margin():
    M = bank([1, 0], [0, 1])
    F = Tensor([[1.0, 1.0]])
    W = mem.address(F, M).weights
    assert mem.top2(W.data)[0].tolist() == [0] and mem.top2(W.data)[1].tolist() == [1]
    assert mem.triplet_loss(F, M, W, alpha=0.0).item() == 0.0


def test_top2_distinct_and_tie_broken_low():
    p, q = mem.top2(np.array([[0.2, 0.4, 0.4], [0.5, 0.5, 0.0], [1 / 3] * 3]))
    assert p.tolist() == [1, 0, 0]
    assert q.tolist() == [2, 1, 1]


def test_triplet_sums_over_features():
    rng = np.random.default_rng(7)
    F, M = random_instance(rng, 6, 3, 4)
    W = mem.address(F, M).weights.data
    p, q = mem.top2(W)
    m = M.items.data
    expect = sum(max(np.linalg.norm(F[i] - m[p[i]]) - np.linalg.norm(F[i] - m[q[i]]) + 1.0, 0.0) for i in range(6))
    assert mem.triplet_loss(F, M, W, 1.0).item() == pytest.approx(expect, rel=1e-13)


# -- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_memory_gradients(seed):
    for r in check_memory(seed):
        assert r.ok, (r.name, r.error)


def test_triplet_check_exercises_active_hinges():
    rng = np.random.default_rng(0)
    F, M = random_instance(rng, 8, 4, 5)
    assert mem.triplet_loss(F, M, mem.address(F, M).weights, 1.0).item() > 0
