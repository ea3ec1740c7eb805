import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symphony_moe.errors import ArgumentError, DimensionError, FrozenError
from symphony_moe.graph import (
    AdjacencyState,
    NormMode,
    estimate_overhead,
    is_connected,
    is_doubly_stochastic,
    load_adjacency,
    row_normalize,
    save_adjacency,
    sinkhorn_normalize,
    spectral_report,
)
from symphony_moe.router import SelectionRecord, smoe_gate_softmax_first, softmax, topk_indices

THREE_TOKENS = np.array([[0, 1], [0, 1], [1, 2]])


def brute_counts(idx, m):
    out = np.zeros((m, m))
    for row in idx:
        s = np.zeros(m)
        s[list(row)] = 1.0
        out += np.outer(s, s)
    return out


def test_accumulate_three_tokens():
    st_ = AdjacencyState(4).accumulate_coselect(THREE_TOKENS)
    expected = np.array([
        [2, 2, 0, 0],
        [2, 3, 1, 0],
        [0, 1, 1, 0],
        [0, 0, 0, 0],
    ], dtype=float)
    np.testing.assert_array_equal(st_.accumulator, expected)


def test_accumulate_zero_tokens_and_single():
    s = AdjacencyState(4)
    s.accumulate_coselect(np.zeros((0, 2), dtype=int))
    assert not s.accumulator.any()
    s.accumulate_coselect(np.array([[2]]))
    expected = np.zeros((4, 4))
    expected[2, 2] = 1
    np.testing.assert_array_equal(s.accumulator, expected)


def test_accumulate_frozen_raises():
    with pytest.raises(FrozenError):
        AdjacencyState(3).freeze().accumulate_coselect(np.array([[0, 1]]))


def test_exclude_diagonal():
    s = AdjacencyState(4, exclude_diagonal=True).accumulate_coselect(THREE_TOKENS)
    assert not np.diag(s.accumulator).any()


def test_rownorm_three_tokens():
    s = AdjacencyState(4, norm_mode="RowNorm").accumulate_coselect(THREE_TOKENS).normalize_and_ema()
    np.testing.assert_allclose(s.A[0], [0.5, 0.5, 0, 0])
    np.testing.assert_allclose(s.A[1], [1 / 3, 1 / 2, 1 / 6, 0])
    np.testing.assert_array_equal(s.A[3], [0, 0, 0, 1])
    np.testing.assert_allclose(s.A.sum(axis=1), 1.0, atol=1e-9)
    assert s.update_count == 1 and not s.accumulator.any()


@pytest.mark.parametrize("mode", list(NormMode))
def test_identity_accumulator_and_zero(mode):
    s = AdjacencyState(5, norm_mode=mode)
    s.accumulator = np.eye(5)
    np.testing.assert_allclose(s.normalize_and_ema().A, np.eye(5), atol=1e-7)
    np.testing.assert_array_equal(AdjacencyState(3, norm_mode=mode).normalize_and_ema().A, np.eye(3))


def test_beta_zero_is_fresh():
    rng = np.random.default_rng(0)
    s = AdjacencyState(4, beta=0.0, norm_mode="RowNorm")
    s.accumulate_coselect(THREE_TOKENS).normalize_and_ema()
    idx = topk_indices(rng.random((20, 4)), 2)
    s.accumulate_coselect(idx)
    fresh = row_normalize(s.accumulator)
    np.testing.assert_array_equal(s.normalize_and_ema().A, fresh)


def test_ema_mixes_after_first_update():
    s = AdjacencyState(3, beta=0.9, norm_mode="RowNorm")
    s.accumulate_coselect(np.array([[0, 1]])).normalize_and_ema()
    first = s.A.copy()
    s.accumulate_coselect(np.array([[1, 2]])).normalize_and_ema()
    fresh = row_normalize(brute_counts([[1, 2]], 3))
    np.testing.assert_allclose(s.A, 0.9 * first + 0.1 * fresh)


def test_zero_init_iff_no_updates():
    s = AdjacencyState(4)
    assert s.update_count == 0 and not s.A.any()
    s.accumulate_coselect(THREE_TOKENS).normalize_and_ema()
    assert s.A.any()


def test_sinkhorn_invariants_random():
    rng = np.random.default_rng(1)
    worst = 0
    for _ in range(200):
        m = int(rng.integers(2, 33))
        idx = topk_indices(rng.random((int(rng.integers(1, 200)), m)), min(2, m))
        A, sweeps = sinkhorn_normalize(brute_counts(idx, m))
        worst = max(worst, sweeps)
        np.testing.assert_allclose(A, A.T, atol=1e-9)
        np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-6)
        np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-6)
        assert A.min() >= 0 and A.max() <= 1
    assert worst <= 100


@pytest.mark.parametrize("A, x, expected", [
    (np.eye(3), [0.2, 0.5, 0.3], [0.2, 0.5, 0.3]),
    (np.full((4, 4), 0.25), [0.7, 0.1, 0.1, 0.1], [0.25] * 4),
    (np.full((2, 2), 0.5), [0.9, 0.1], [0.5, 0.5]),
])
def test_symphony_gate_examples(A, x, expected):
    out = AdjacencyState.from_matrix(A).symphony_gate(np.array([x]))
    np.testing.assert_allclose(out.gates[0], expected, atol=1e-15)


def test_symphony_gate_dimension():
    with pytest.raises(DimensionError):
        AdjacencyState.from_matrix(np.eye(3)).symphony_gate(np.ones((2, 4)))


def test_symphony_route_worked_example():
    A = np.array([[1, 0, 0], [0, 0.5, 0.5], [0, 0.5, 0.5]])
    s = AdjacencyState.from_matrix(A, frozen=True)
    rec, gates = s.symphony_route(np.log([[0.2, 0.5, 0.3]]), 2)
    assert rec.indices.tolist() == [[1, 2]]
    np.testing.assert_allclose(gates.gates[0], [0, 0.4, 0.4], atol=1e-12)


def test_symphony_route_identity_and_bootstrap_match_baseline():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(64, 6))
    base_g, base_rec = smoe_gate_softmax_first(z, 2)
    for state in (AdjacencyState.from_matrix(np.eye(6), frozen=True), AdjacencyState(6)):
        rec, g = state.symphony_route(z, 2)
        np.testing.assert_array_equal(rec.indices, base_rec.indices)
        np.testing.assert_array_equal(rec.weights, base_rec.weights)
        np.testing.assert_array_equal(g.gates, base_g.gates)


def test_symphony_route_counts_base_gate():
    # base TopK {0, 2}, smoothed (0.275, 0.345, 0.38) routes to {1, 2}
    A = np.array([[0.5, 0.5, 0], [0.5, 0.3, 0.2], [0, 0.2, 0.8]])
    s = AdjacencyState.from_matrix(A)
    rec, _ = s.symphony_route(np.log([[0.45, 0.1, 0.45]]), 2)
    np.testing.assert_array_equal(s.accumulator, brute_counts([[0, 2]], 3))
    assert rec.indices.tolist() == [[1, 2]]


@pytest.mark.parametrize("A, eig, rho, connected", [
    (np.full((4, 4), 0.25), [1, 0, 0, 0], 0.0, True),
    (np.eye(3), [1, 1, 1], 1.0, False),
    (np.array([[0.6, 0.4], [0.4, 0.6]]), [1, 0.2], 0.2, True),
])
def test_spectral_examples(A, eig, rho, connected):
    r = spectral_report(A)
    np.testing.assert_allclose(r.eigenvalues, eig, atol=1e-12)
    assert r.rho == pytest.approx(rho, abs=1e-12)
    assert r.connected is connected


def test_spectral_margin():
    r = spectral_report(np.array([[0.6, 0.4], [0.4, 0.6]]), gate_row=[0.9, 0.1], k=1)
    assert r.margin_g == pytest.approx(0.16)


def test_overhead_examples():
    e = estimate_overhead(256, 8, 4096, 58, 4)
    assert e.train_bytes / 2**20 == pytest.approx(39.875, abs=1e-12)
    assert e.infer_bytes / 2**20 == pytest.approx(14.5, abs=1e-12)
    assert round(e.train_flops / 2**30, 2) == 14.51
    assert round(e.infer_flops / 2**30, 2) == 14.5
    e = estimate_overhead(1, 1, 1, 1)
    assert (e.infer_bytes, e.infer_flops) == (4, 1)
    e = estimate_overhead(16, 2, 512)
    assert e.infer_flops == 131072
    assert e.train_flops - e.infer_flops == 512
    with pytest.raises(ArgumentError, match="K exceeds expert count"):
        estimate_overhead(4, 5, 10)


def test_snapshot_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    s = AdjacencyState(5, beta=0.8).accumulate_coselect(topk_indices(rng.random((30, 5)), 2)).normalize_and_ema()
    p = tmp_path / "a.txt"
    s.save(p)
    assert p.read_text().splitlines()[0] == "M 5 mode Sinkhorn beta 0.8 updates 1"
    A, mode, beta, updates = load_adjacency(p)
    np.testing.assert_allclose(A, s.A, rtol=1e-11)
    assert (mode, beta, updates) == (NormMode.SINKHORN, 0.8, 1)
    bad = tmp_path / "bad.txt"
    save_adjacency(bad, np.eye(2))
    bad.write_text(bad.read_text().replace("updates", "count"))
    with pytest.raises(ArgumentError):
        load_adjacency(bad)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 10), st.integers(1, 5))
def test_count_symmetry_and_partial_merge(seed, m, batches):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, m + 1))
    s = AdjacencyState(m)
    parts = []
    for _ in range(batches):
        idx = topk_indices(rng.random((int(rng.integers(0, 20)), m)), k)
        s.accumulate_coselect(idx)
        parts.append(AdjacencyState(m).accumulate_coselect(idx).accumulator)
    assert np.array_equal(s.accumulator, s.accumulator.T)
    np.testing.assert_array_equal(s.accumulator, sum(parts))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(3, 8))
def test_permutation_equivariance(seed, m):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m)
    P = np.eye(m)[perm]  # (P v)[i] = v[perm[i]]
    z = rng.normal(size=(40, m))
    idx = topk_indices(z, 2)
    a = AdjacencyState(m).accumulate_coselect(idx).normalize_and_ema()
    b = AdjacencyState(m).accumulate_coselect(topk_indices(z[:, perm], 2)).normalize_and_ema()
    np.testing.assert_allclose(b.A, P @ a.A @ P.T, atol=1e-9)
    a.freeze(), b.freeze()
    ra, _ = a.symphony_route(z, 2)
    rb, _ = b.symphony_route(z[:, perm], 2)
    r = np.sort(softmax(z) @ a.A.T, axis=1)
    clear = r[:, -2] - r[:, -3] > 1e-9
    mapped = np.sort(perm[rb.indices], axis=1)
    np.testing.assert_array_equal(mapped[clear], ra.indices[clear])


def test_helpers():
    assert is_doubly_stochastic(np.full((3, 3), 1 / 3))
    assert not is_doubly_stochastic(np.array([[1.0, 0.0], [1.0, 0.0]]))
    assert is_connected(np.array([[0.5, 0.5, 0], [0.5, 0.25, 0.25], [0, 0.25, 0.75]]))
    assert not is_connected(np.eye(2))


def test_selection_record_input():
    rec = SelectionRecord(THREE_TOKENS, np.full((3, 2), 0.5))
    np.testing.assert_array_equal(AdjacencyState(4).accumulate_coselect(rec).accumulator,
                                  brute_counts(THREE_TOKENS, 4))
