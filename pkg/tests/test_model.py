import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from loratrace.model import (
    ConfigError,
    ModelConfig,
    activation,
    activation_grad,
    attention,
    attention_weights,
    forward,
    forward_capture,
    generate_model,
    layer_forward,
    mlp_forward,
    probe_capture,
    rms_norm,
    rope_rotate,
    softmax_rows,
)
from loratrace.numerics import finite_diff_gradient


def test_rms_norm_literal():
    out = rms_norm(np.array([3.0, 4.0]), np.ones(2), 1e-300)
    np.testing.assert_allclose(out, [0.6, 0.8], rtol=1e-15)


def test_rms_norm_mean_normalized():
    out = rms_norm(np.array([3.0, 4.0]), np.ones(2), 1e-300, "mean_normalized")
    np.testing.assert_allclose(out, np.array([0.6, 0.8]) * math.sqrt(2), rtol=1e-15)


@pytest.mark.parametrize("mode", ["paper_literal", "mean_normalized"])
def test_rms_norm_zero(mode):
    assert np.all(rms_norm(np.zeros(4), np.arange(4.0), 1e-6, mode) == 0)


@pytest.mark.parametrize("mode", ["paper_literal", "mean_normalized"])
def test_rms_norm_scale_direction(mode):
    x = np.random.default_rng(0).standard_normal(16)
    g = np.random.default_rng(1).uniform(0.5, 1.5, 16)
    a, b = rms_norm(x, g, 1e-12, mode), rms_norm(10 * x, g, 1e-12, mode)
    assert a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) >= 1 - 1e-9


def test_rope_identity_at_zero():
    v = np.random.default_rng(0).standard_normal(8)
    assert np.array_equal(rope_rotate(v, 0), v)


def test_rope_norm_preserving():
    v = np.random.default_rng(0).standard_normal(8)
    assert np.linalg.norm(rope_rotate(v, 5)) == pytest.approx(np.linalg.norm(v), abs=1e-12)


def test_rope_two_dims():
    np.testing.assert_allclose(rope_rotate(np.array([1.0, 0.0]), 1, 10000.0),
                               [math.cos(1), math.sin(1)], rtol=1e-15)


def test_odd_hidden_size_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(hidden_size=7, mlp_size=4, num_layers=1, vocab_size=4)
    with pytest.raises(ConfigError):
        rope_rotate(np.ones(3), 1)


def test_single_token_attention(small_model):
    cfg, w = small_model.config, small_model.layers[0]
    x = small_model.embedding[:1]
    h = rms_norm(x, w.attn_norm, cfg.norm_eps)
    assert np.array_equal(attention(x, w, cfg), h @ w.w_v @ w.w_o + x)


def test_zero_value_projection(small_model):
    cfg = small_model.config
    w = small_model.layers[0].replace(w_v=np.zeros_like(small_model.layers[0].w_v))
    X = small_model.embedding[:5]
    assert np.array_equal(attention(X, w, cfg), X)


def test_attention_rows_sum_to_one(small_model):
    A = attention_weights(small_model.embedding[:3], small_model.layers[0], small_model.config)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.triu(A, 1) == 0)


def test_rope_irrelevant_for_single_token(small_model):
    cfg, w = small_model.config, small_model.layers[1]
    rng = np.random.default_rng(2)
    w2 = w.replace(w_q=rng.standard_normal(w.w_q.shape), w_k=rng.standard_normal(w.w_k.shape))
    x = small_model.embedding[3:4]
    assert np.array_equal(attention(x, w, cfg), attention(x, w2, cfg))
    # first position of a longer sequence only sees itself
    X = small_model.embedding[3:7]
    assert np.allclose(attention(X, w, cfg)[0], attention(X, w2, cfg)[0], rtol=0, atol=1e-15)


def test_mlp_zero_projections(small_model):
    cfg, w = small_model.config, small_model.layers[0]
    Y = np.random.default_rng(0).standard_normal((4, cfg.hidden_size))
    assert np.array_equal(mlp_forward(Y, w.replace(w_down=np.zeros_like(w.w_down)), cfg), Y)
    assert np.array_equal(mlp_forward(Y, w.replace(w_up=np.zeros_like(w.w_up)), cfg), Y)


def test_mlp_recomposition(small_model):
    cfg, w = small_model.config, small_model.layers[0]
    Y = np.random.default_rng(0).standard_normal((4, cfg.hidden_size))
    out = np.empty_like(Y)
    for i, y in enumerate(Y):
        h = y * w.mlp_norm / math.sqrt(float(np.dot(y, y)) + cfg.norm_eps)
        g = h @ w.w_gate
        u = h @ w.w_up
        silu = g / (1 + np.exp(-g))
        out[i] = (silu * u) @ w.w_down + y
    np.testing.assert_allclose(mlp_forward(Y, w, cfg), out, rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("kind", ["silu", "gelu"])
def test_activation_derivative(kind):
    for x0 in np.linspace(-4, 4, 17):
        fd = finite_diff_gradient(lambda v: float(activation(v, kind)[0]), np.array([x0]), 1e-6)
        assert activation_grad(np.array([x0]), kind)[0] == pytest.approx(fd[0], abs=1e-8)


def test_residual_only_model(small_cfg):
    m = generate_model(small_cfg, 0)
    zeroed = [lw.replace(w_v=np.zeros_like(lw.w_v), w_down=np.zeros_like(lw.w_down)) for lw in m.layers]
    m = m.with_layers(zeroed)
    for tr in forward_capture(m, [9]):
        assert np.array_equal(tr.z_out[0], m.embedding[9])


def test_capture_chains_bitwise():
    m = generate_model(ModelConfig(16, 40, 4, 32), 3)
    ids = [1, 4, 9, 2]
    traces = forward_capture(m, ids)
    for a, b in zip(traces, traces[1:]):
        assert np.array_equal(a.z_out, b.x_in)
    for tr in traces:
        y, z = layer_forward(tr.x_in, m.layers[tr.layer_index], m.config)
        assert np.array_equal(y, tr.y_mid) and np.array_equal(z, tr.z_out)
    assert np.array_equal(traces[-1].z_out, forward(m, ids))


def test_probe_capture_matches_single_sequences(small_model):
    ids = [0, 5, 7]
    batched = probe_capture(small_model, ids)
    for j, t in enumerate(ids):
        single = forward_capture(small_model, [t])
        for b, s in zip(batched, single):
            np.testing.assert_allclose(b.y_mid[j], s.y_mid[0], rtol=1e-14, atol=1e-15)
            np.testing.assert_allclose(b.z_out[j], s.z_out[0], rtol=1e-14, atol=1e-15)


def test_single_token_collapse(flagship_base):
    cfg = flagship_base.config
    for tr in forward_capture(flagship_base, [17]):
        w = flagship_base.layers[tr.layer_index]
        h = rms_norm(tr.x_in, w.attn_norm, cfg.norm_eps, cfg.norm_mode)
        vo = (h @ w.w_v) @ w.w_o
        assert np.array_equal(tr.y_mid, vo + tr.x_in)
        np.testing.assert_allclose(tr.y_mid - tr.x_in, vo, rtol=0, atol=1e-14)


def test_out_of_vocab(small_model):
    with pytest.raises(IndexError):
        forward(small_model, [small_model.config.vocab_size])


def test_generate_deterministic(small_cfg):
    a, b = generate_model(small_cfg, 4), generate_model(small_cfg, 4)
    assert a.embedding.tobytes() == b.embedding.tobytes()
    for la, lb in zip(a.layers, b.layers):
        assert all(np.array_equal(getattr(la, k), getattr(lb, k)) for k in ("w_q", "w_v", "w_up"))


def test_embeddings_non_parallel(flagship_base):
    e = flagship_base.embedding
    u = e / np.linalg.norm(e, axis=1, keepdims=True)
    c = np.abs(u @ u.T)
    np.fill_diagonal(c, 0)
    assert c.max() < 1 - 1e-6


def test_forward_finite(flagship_base):
    assert np.all(np.isfinite(forward(flagship_base, [1, 2, 3, 4, 5])))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
       arrays(np.float64, (3,), elements=st.floats(-50, 50)))
def test_softmax_row_shift(a, alpha):
    np.testing.assert_allclose(softmax_rows(a), softmax_rows(a + alpha[:, None]), rtol=0, atol=1e-12)


def test_mlp_distinct_outputs(small_cfg):
    m = generate_model(small_cfg, 8)
    rng = np.random.default_rng(0)
    Y1 = rng.standard_normal((200, small_cfg.hidden_size))
    Y2 = rng.standard_normal((200, small_cfg.hidden_size))
    d = np.linalg.norm(mlp_forward(Y1, m.layers[0], small_cfg) - mlp_forward(Y2, m.layers[0], small_cfg), axis=1)
    assert d.min() > 1e-6
