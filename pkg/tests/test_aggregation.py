import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from distlion import aggregation as agg
from distlion.errors import CorruptStreamError, InvalidInputError, InvalidParameterError


def _updates(rng, n, d, binary=False):
    u = rng.integers(-1, 2, size=(n, d))
    if binary:
        u[u == 0] = 1
    return list(u.astype(np.int8))


def test_average_examples():
    assert agg.aggregate_avg([[1], [1], [-1]]).values.tolist() == [1 / 3]
    assert agg.aggregate_avg([np.array([1, -1, 0])]).values.tolist() == [1.0, -1.0, 0.0]
    assert agg.aggregate_avg([[1, -1], [-1, 1]]).values.tolist() == [0.0, 0.0]


def test_majority_examples():
    assert agg.aggregate_majority([[1], [1], [-1]]).values.tolist() == [1.0]
    assert agg.aggregate_majority([[1], [-1]]).values.tolist() == [0.0]
    five = [[-1, 1, 1], [-1, 1, -1], [-1, -1, 1], [1, 1, -1], [-1, -1, 0]]
    sums = np.sum(five, axis=0)
    assert sums.tolist() == [-3, 1, 0]
    assert agg.aggregate_majority(five).values.tolist() == [-1.0, 1.0, 0.0]


def test_aggregate_dispatch_and_errors():
    assert agg.aggregate([[1]], "avg").mode == "avg"
    assert agg.aggregate([[1]], "majority_vote").mode == "majority_vote"
    with pytest.raises(InvalidInputError):
        agg.aggregate_avg([])
    with pytest.raises(InvalidInputError):
        agg.aggregate_majority([])
    with pytest.raises(InvalidParameterError):
        agg.aggregate([[1]], "median")


@given(st.integers(1, 17), st.integers(1, 30), st.integers(0, 2**32 - 1), st.booleans())
def test_majority_is_sign_of_average(n, d, seed, binary):
    rng = np.random.default_rng(seed)
    deltas = _updates(rng, n, d, binary)
    avg = agg.aggregate_avg(deltas).values
    mavo = agg.aggregate_majority(deltas).values
    assert np.array_equal(mavo, np.sign(avg))
    assert np.abs(avg).max() <= 1 and np.abs(mavo).max() <= 1
    # averages are multiples of 1/N
    assert np.array_equal(np.round(avg * n), avg * n)


@given(st.integers(2, 9), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_aggregates_are_permutation_invariant(n, d, seed):
    rng = np.random.default_rng(seed)
    deltas = _updates(rng, n, d)
    perm = [deltas[i] for i in rng.permutation(n)]
    for fn in (agg.aggregate_avg, agg.aggregate_majority):
        assert np.array_equal(fn(deltas).values, fn(perm).values)


# -- TernGrad ----------------------------------------------------------------

class _ForcedUniform:
    """Generator stand-in whose uniforms are fixed, to force the Bernoulli outcomes."""

    def __init__(self, value):
        self.value = value

    def random(self, size):
        return np.full(size, self.value)


def test_terngrad_examples():
    s, t = agg.terngrad_compress([0.0, 0.0], np.random.default_rng(0))
    assert s == 0.0 and t.tolist() == [0, 0]
    s, t = agg.terngrad_compress([0.5, -1.0], _ForcedUniform(0.0))
    assert s == 1.0 and t.tolist() == [1, -1]
    s, t = agg.terngrad_compress([0.5, -1.0], _ForcedUniform(0.75))
    assert t.tolist() == [0, -1]


def test_terngrad_shared_scale():
    s, _ = agg.terngrad_compress([0.5, -1.0], np.random.default_rng(0), scale=4.0)
    assert s == 4.0
    with pytest.raises(InvalidParameterError):
        agg.terngrad_compress([0.5, -1.0], np.random.default_rng(0), scale=0.5)


def test_terngrad_unbiased_monte_carlo():
    rng = np.random.default_rng(1)
    g = np.array([0.3, -0.8, 0.05, 1.0])
    n = 20_000
    total = np.zeros(4)
    for _ in range(n):
        total += agg.terngrad_decompress(*agg.terngrad_compress(g, rng))
    se = np.sqrt((np.abs(g).max() * np.abs(g) - g**2) / n)
    assert np.all(np.abs(total / n - g) <= 3 * se + 1e-12)


# -- sparsifiers -------------------------------------------------------------

def test_graddrop_example():
    state = agg.CompressorState.zeros(4)
    sparse, state = agg.graddrop_compress([0.1, -5.0, 0.3, 2.0], state, 0.5)
    assert sparse.indices.tolist() == [1, 3]
    assert sparse.values.tolist() == [-5.0, 2.0]
    assert state.residual.tolist() == [0.1, 0.0, 0.3, 0.0]


def test_graddrop_keep_everything():
    g = np.array([1.0, -2.0, 3.0])
    sparse, state = agg.graddrop_compress(g, agg.CompressorState.zeros(3), 1.0)
    assert np.array_equal(sparse.to_dense(), g)
    assert state.residual.tolist() == [0.0, 0.0, 0.0]


def test_graddrop_two_round_conservation():
    rng = np.random.default_rng(3)
    state = agg.CompressorState.zeros(10)
    emitted = np.zeros(10)
    g1, g2 = rng.standard_normal(10), rng.standard_normal(10)
    for g in (g1, g2):
        sparse, state = agg.graddrop_compress(g, state, 0.2)
        emitted += sparse.to_dense()
    assert np.array_equal(emitted + state.residual, g1 + g2)


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
def test_graddrop_bad_fraction(bad):
    with pytest.raises(InvalidParameterError):
        agg.graddrop_compress([1.0], agg.CompressorState.zeros(1), bad)


def test_top_k_count():
    sparse, _ = agg.graddrop_compress(np.arange(1.0, 101.0), agg.CompressorState.zeros(100), 0.04)
    assert sparse.indices.tolist() == [96, 97, 98, 99]


@given(st.integers(0, 2**32 - 1))
def test_dgc_without_momentum_equals_graddrop(seed):
    rng = np.random.default_rng(seed)
    cfg = agg.DgcConfig(keep_fraction=0.1, momentum=0.0, warmup_schedule=())
    a = b = agg.CompressorState.zeros(20)
    for _ in range(5):
        g = rng.standard_normal(20)
        sa, a = agg.graddrop_compress(g, a, 0.1)
        sb, b = agg.dgc_compress(g, b, cfg)
        assert np.array_equal(sa.indices, sb.indices) and np.array_equal(sa.values, sb.values)
        assert np.array_equal(a.residual, b.residual)


def test_dgc_clipping_halves_input():
    cfg = agg.DgcConfig(keep_fraction=0.5, momentum=0.0, clip_norm=5.0, warmup_schedule=())
    g = np.array([6.0, 8.0, 0.0, 0.0])  # norm 10
    sparse, state = agg.dgc_compress(g, agg.CompressorState.zeros(4), cfg)
    assert np.allclose(sparse.to_dense() + state.residual, g / 2, rtol=1e-15)


def test_dgc_single_coordinate_always_emitted():
    cfg = agg.DgcConfig(keep_fraction=0.04, momentum=0.9)
    state = agg.CompressorState.zeros(1)
    for g in (1.5, -0.5):
        sparse, state = agg.dgc_compress([g], state, cfg)
        assert sparse.values.tolist() == [g]
        assert state.residual.tolist() == [0.0] and state.velocity.tolist() == [0.0]


def test_dgc_momentum_factor_masking():
    cfg = agg.DgcConfig(keep_fraction=0.5, momentum=0.5, warmup_schedule=())
    sparse, state = agg.dgc_compress([4.0, 1.0], agg.CompressorState.zeros(2), cfg)
    assert sparse.indices.tolist() == [0]
    assert state.velocity.tolist() == [0.0, 1.0]
    assert state.residual.tolist() == [0.0, 1.0]
    sparse, state = agg.dgc_compress([0.0, 1.0], state, cfg)
    # u = 0.5 * [0, 1] + [0, 1] = [0, 1.5]; v = [0, 1] + u = [0, 2.5]
    assert sparse.indices.tolist() == [1] and sparse.values.tolist() == [2.5]


def test_dgc_warmup_schedule():
    cfg = agg.DgcConfig()
    fractions = [agg.dgc_keep_fraction(cfg, t) for t in range(5)]
    assert fractions == [0.25, 0.0625, 0.04, 0.04, 0.04]


@pytest.mark.parametrize(
    "kwargs", [dict(momentum=1.0), dict(clip_norm=0.0), dict(keep_fraction=0.0), dict(warmup_stage_rounds=0)]
)
def test_dgc_config_validation(kwargs):
    with pytest.raises(InvalidParameterError):
        agg.DgcConfig(**kwargs)


def test_sparse_update_validation():
    with pytest.raises(InvalidInputError):
        agg.SparseUpdate(np.array([2, 1]), np.array([1.0, 1.0]), 4)
    with pytest.raises(InvalidInputError):
        agg.SparseUpdate(np.array([4]), np.array([1.0]), 4)
    with pytest.raises(InvalidInputError):
        agg.SparseUpdate(np.array([0]), np.array([0.0]), 4)


def test_sparse_wire_golden():
    sp = agg.SparseUpdate(np.array([1, 3]), np.array([-5.0, 2.0]), 4)
    data = agg.pack_sparse(sp)
    assert data == oracles.pack_sparse([1, 3], [-5.0, 2.0], 4)
    assert data[:4] == (2).to_bytes(4, "little")
    assert len(data) * 8 == math.ceil(agg.sparse_payload_bits(2, 4) / 8) * 8


@given(st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_sparse_wire_round_trip(d, seed):
    rng = np.random.default_rng(seed)
    dense = np.where(rng.random(d) < 0.3, rng.standard_normal(d), 0.0)
    sp = agg.SparseUpdate.from_dense(dense)
    data = agg.pack_sparse(sp)
    assert data == oracles.pack_sparse(sp.indices.tolist(), sp.values.tolist(), d)
    assert np.array_equal(agg.unpack_sparse(data, d).to_dense(), dense)


def test_sparse_wire_rejects_truncation():
    data = agg.pack_sparse(agg.SparseUpdate(np.array([1]), np.array([1.0]), 4))
    with pytest.raises(CorruptStreamError):
        agg.unpack_sparse(data[:-1], 4)


# -- bandwidth ---------------------------------------------------------------

def test_bandwidth_examples():
    assert agg.bandwidth_of("d_lion_mavo", 1000, 16) == (1000, 1000)
    assert agg.bandwidth_of("d_lion_avg", 1000, 16) == (1000, 5000)
    assert agg.bandwidth_of("dgc", 1000, 16, 0.04) == (1280, 32000)
    assert agg.bandwidth_of("g_adamw", 1000, 16) == (32000, 32000)
    assert agg.bandwidth_of("terngrad", 1000, 16) == (1500, 6000)


@pytest.mark.parametrize("method", ["g_lion", "g_adamw", "terngrad", "dgc", "d_lion_avg", "d_lion_mavo"])
@pytest.mark.parametrize("d,n", [(1000, 16), (1000, 4), (37, 3), (4096, 32)])
def test_formula_column_matches_table(method, d, n):
    assert agg.formula_bandwidth(method, d, n, 0.04) == oracles.table_bandwidth(method, d, n)


def test_bandwidth_aliases_and_errors():
    assert agg.bandwidth_of("mavo", 10, 2) == agg.bandwidth_of("d_lion_mavo", 10, 2)
    with pytest.raises(InvalidParameterError):
        agg.bandwidth_of("sgd", 10, 2)
    with pytest.raises(InvalidParameterError):
        agg.bandwidth_of("d_lion_mavo", 0, 2)


def test_keep_fraction_spellings():
    assert agg.canonical_keep_fraction(None, 0.96) == pytest.approx(0.04)
    assert agg.canonical_keep_fraction(0.04, None) == 0.04
    with pytest.raises(InvalidParameterError):
        agg.canonical_keep_fraction(0.1, 0.5)


def test_ledger_totals():
    ledger = agg.BandwidthLedger()
    ledger.record([b"ab", b"c"], [b"xyz"], 20, 20, (16, 24))
    ledger.record([b"a"], [b""], 8, 0, (8, 0))
    assert ledger.up == [24, 8] and ledger.down == [24, 0]
    assert ledger.up_padding == [4, 0] and ledger.down_padding == [4, 0]
    assert ledger.total_up == 32 and ledger.total_down == 24 and len(ledger) == 2
