import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reconprobe import nn
from reconprobe.errors import ConfigError, InvalidInputError, ShapeError, StateError
from reconprobe.model import ForwardGraph, ModelConfig, backward, forward_graph, init_weights, mlm_loss_and_grads
from reconprobe.selftest import gradient_check


def erf_series(x, terms=60):
    """Maclaurin series of erf, independent of scipy."""
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


# --- softmax ---------------------------------------------------------------

def test_softmax_symmetric_row():
    np.testing.assert_array_equal(nn.softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])


def test_softmax_ln2_row():
    np.testing.assert_allclose(nn.softmax_rows(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]], atol=1e-15)


def test_softmax_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        nn.softmax_rows(np.array([[0.0, np.nan]]))
    with pytest.raises(InvalidInputError):
        nn.softmax_rows(np.array([[np.inf, 0.0]]))


def test_softmax_thousand_rows_sum_to_one():
    rows = np.random.default_rng(0).uniform(-50, 50, size=(1000, 23))
    p = nn.softmax_rows(rows)
    assert np.all(p >= 0)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant(row, c):
    np.testing.assert_allclose(nn.softmax_rows(row[None]), nn.softmax_rows(row[None] + c), atol=1e-12, rtol=0)


# --- layer norm ------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = nn.layer_norm(np.full(6, 3.7), np.ones(6), np.zeros(6), 1e-12)
    assert np.abs(out).max() < 1e-9


def test_layer_norm_unit_pair():
    np.testing.assert_allclose(nn.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), 0.0), [1.0, -1.0])


def test_layer_norm_zero_gamma_collapses_to_beta():
    b = np.array([0.3, -2.0, 5.0])
    np.testing.assert_array_equal(nn.layer_norm(np.array([9.0, 1.0, -4.0]), np.zeros(3), b, 1e-5), b)


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        nn.layer_norm(np.zeros(3), np.ones(4), np.zeros(4))


# --- gelu ------------------------------------------------------------------

def test_gelu_values():
    assert nn.gelu(0.0) == 0.0
    expected = 0.5 * (1 + erf_series(1 / math.sqrt(2)))
    assert abs(expected - 0.8413447460685429) < 1e-12
    assert abs(nn.gelu(1.0) - expected) < 1e-14
    assert abs(nn.gelu(10.0) - 10.0) < 1e-12


def test_gelu_grad_matches_finite_difference():
    x = np.linspace(-4, 4, 41)
    h = 1e-6
    fd = (nn.gelu(x + h) - nn.gelu(x - h)) / (2 * h)
    np.testing.assert_allclose(nn.gelu_grad(x), fd, atol=1e-8)


# --- linear ----------------------------------------------------------------

def test_linear_identity():
    x = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_array_equal(nn.linear(x, np.eye(3), np.zeros(3)), x)


def test_linear_hand_product():
    out = nn.linear(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0], [5.0, 6.0]]), np.array([0.5, -1.0]))
    np.testing.assert_array_equal(out, [[11.5, 16.0]])


def test_linear_zero_weight_gives_bias_rows():
    b = np.array([1.0, -2.0])
    out = nn.linear(np.ones((3, 4)), np.zeros((2, 4)), b)
    np.testing.assert_array_equal(out, np.tile(b, (3, 1)))


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        nn.linear(np.ones((2, 3)), np.ones((2, 4)), np.zeros(2))


def test_linear_sum_loss_bias_gradient_is_ones():
    x = np.random.default_rng(2).normal(size=(5, 3))
    out, cache = nn.linear_forward(x, np.random.default_rng(3).normal(size=(4, 3)), np.zeros(4))
    _, _, db = nn.linear_backward(np.ones_like(out), cache)
    np.testing.assert_array_equal(db, np.full(4, 5.0))  # ones per row, summed over 5 rows


# --- attention -------------------------------------------------------------

def _scalar_attention(x, wq, bq, wk, bk, wv, bv, wo, bo):
    """Single-head attention in plain Python floats."""
    n, d = len(x), len(x[0])

    def lin(row, w, b):
        return [sum(w[o][i] * row[i] for i in range(d)) + b[o] for o in range(len(w))]

    q = [lin(r, wq, bq) for r in x]
    k = [lin(r, wk, bk) for r in x]
    v = [lin(r, wv, bv) for r in x]
    out = []
    for i in range(n):
        s = [sum(q[i][t] * k[j][t] for t in range(d)) / math.sqrt(d) for j in range(n)]
        e = [math.exp(z) for z in s]
        a = [z / sum(e) for z in e]
        ctx = [sum(a[j] * v[j][t] for j in range(n)) for t in range(d)]
        out.append(lin(ctx, wo, bo))
    return out


def _rand_attn_weights(rng, d):
    return [rng.normal(size=(d, d)) if i % 2 == 0 else rng.normal(size=d) for i in range(8)]


def test_attention_hand_example():
    x = [[1.0, 0.5], [-0.5, 2.0]]
    wq, bq = [[1.0, 0.0], [0.5, 1.0]], [0.0, 0.1]
    wk, bk = [[0.0, 1.0], [1.0, -1.0]], [0.2, 0.0]
    wv, bv = [[2.0, 0.0], [0.0, 1.0]], [0.0, 0.0]
    wo, bo = [[1.0, 1.0], [0.0, 1.0]], [0.5, -0.5]
    expected = _scalar_attention(x, wq, bq, wk, bk, wv, bv, wo, bo)
    got = nn.multi_head_attention(np.array(x), *map(np.array, (wq, bq, wk, bk, wv, bv, wo, bo)), heads=1)
    np.testing.assert_allclose(got, expected, atol=1e-13)


def test_attention_single_token_is_projected_value():
    rng = np.random.default_rng(4)
    w = _rand_attn_weights(rng, 4)
    x = rng.normal(size=(1, 4))
    v = nn.linear(x, w[4], w[5])
    np.testing.assert_allclose(nn.multi_head_attention(x, *w, heads=2), nn.linear(v, w[6], w[7]), atol=1e-14)


def test_attention_identical_rows_stay_identical():
    rng = np.random.default_rng(5)
    w = _rand_attn_weights(rng, 6)
    x = np.tile(rng.normal(size=6), (7, 1))
    out = nn.multi_head_attention(x, *w, heads=3)
    assert np.abs(out - out[0]).max() < 1e-12


def test_attention_indivisible_heads():
    rng = np.random.default_rng(6)
    with pytest.raises(ConfigError):
        nn.multi_head_attention(rng.normal(size=(2, 6)), *_rand_attn_weights(rng, 6), heads=4)


# --- backward --------------------------------------------------------------

def test_backward_before_forward_is_state_error():
    with pytest.raises(StateError):
        backward(ForwardGraph(), np.zeros((1, 1, 1)))


def test_backward_graph_is_single_use():
    cfg = ModelConfig(n_layers=1, n_heads=1, hidden=4, ff_dim=4, vocab_size=7, max_positions=4)
    w = init_weights(cfg, np.random.default_rng(0))
    g = forward_graph(w, [1, 2, 3])
    backward(g, np.zeros_like(g.logits))
    with pytest.raises(StateError):
        backward(g, np.zeros_like(g.logits))


def test_unused_parameters_get_zero_gradient():
    cfg = ModelConfig(n_layers=1, n_heads=1, hidden=4, ff_dim=4, vocab_size=7, max_positions=8)
    w = init_weights(cfg, np.random.default_rng(0), std=0.5)
    ids = np.array([[5, 6, 1]])
    mlm_loss_and_grads(w, ids, ids, np.ones_like(ids, dtype=bool), use_positions=False)
    assert not w.params["pos_emb"].grad.any()
    w.zero_grad()
    mlm_loss_and_grads(w, ids, ids, np.ones_like(ids, dtype=bool))
    assert not w.params["pos_emb"].grad[3:].any()
    assert w.params["pos_emb"].grad[:3].any()


def test_gradient_check_small_model():
    rng = np.random.default_rng(7)
    cfg = ModelConfig(n_layers=2, n_heads=2, hidden=8, ff_dim=12, vocab_size=11, max_positions=6)
    w = init_weights(cfg, rng, std=0.4)
    ids = rng.integers(0, 11, size=(2, 5))
    assert gradient_check(w, ids, rng.integers(0, 11, size=(2, 5)), rng.random((2, 5)) < 0.5) < 1e-4


def test_parameter_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.Parameter("x", np.zeros(3), np.zeros(4))
