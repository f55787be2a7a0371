import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tct import autodiff as ad
from tct.attention import (AttentionMask, ConfigurationError, Dropout, EncoderLayer, FeedForward, LayerNorm,
                           MultiHeadAttention, Sublayer, attention_weights, positional_encoding,
                           scaled_dot_attention, sublayer)
from tct.autodiff import Initializer, Tensor
from tct.gradcheck import attention_suite


def test_identity_attention_matches_frozen(frozen):
    eye = Tensor(np.eye(2))
    out = scaled_dot_attention(eye, eye, eye).data
    np.testing.assert_allclose(out, frozen["identity_attention"], atol=1e-12)
    np.testing.assert_allclose(out, [[0.6698, 0.3302], [0.3302, 0.6698]], atol=1e-4)


def test_causal_mask_on_equal_keys_gives_prefix_average():
    v = Tensor(np.arange(12.0).reshape(4, 3))
    q = k = Tensor(np.zeros((4, 3)))
    out = scaled_dot_attention(q, k, v, AttentionMask(causal=True)).data
    expected = np.cumsum(v.data, axis=0) / np.arange(1, 5)[:, None]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_fully_masked_row_is_an_error():
    q = Tensor(np.ones((2, 4)))
    with pytest.raises(ad.ContractError):
        scaled_dot_attention(q, q, q, AttentionMask(key_padding=np.array([True, True])))


def test_mask_kinds():
    assert AttentionMask().kind == "none"
    assert AttentionMask(causal=True).kind == "causal"
    assert AttentionMask(key_padding=np.zeros(3, bool)).kind == "padding"
    assert AttentionMask(causal=True, key_padding=np.zeros(3, bool)).kind == "causal+padding"


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_masked_keys_get_exactly_zero_weight(n, m, seed):
    rng = np.random.default_rng(seed)
    pad = rng.random(m) < 0.4
    pad[rng.integers(m)] = False
    w = attention_weights(rng.normal(size=(n, 4)) * 3, rng.normal(size=(m, 4)) * 3, AttentionMask(key_padding=pad))
    assert (w[:, pad] == 0.0).all()
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


def test_head_count_must_divide_width():
    with pytest.raises(ConfigurationError):
        MultiHeadAttention(10, 3, Initializer(0), "m")


def test_single_head_identity_projections_reduce_to_attention():
    mha = MultiHeadAttention(4, 1, Initializer(0), "m")
    for w in (mha.w_q, mha.w_k, mha.w_v, mha.w_o):
        w.data = np.eye(4)
    rng = np.random.default_rng(0)
    q, k = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4)))
    np.testing.assert_allclose(mha(q, k, k).data, scaled_dot_attention(q, k, k).data, atol=1e-14)


def test_multi_head_output_shape():
    mha = MultiHeadAttention(16, 4, Initializer(0), "m")
    x = Tensor(np.random.default_rng(0).normal(size=(5, 16)))
    assert mha(x, x, x).shape == (5, 16)


def test_heads_use_separate_column_blocks():
    """Changing head 1's key block leaves head 0's part of the merged output alone."""
    mha = MultiHeadAttention(8, 2, Initializer(0), "m")
    mha.w_o.data = np.eye(8)
    x = Tensor(np.random.default_rng(1).normal(size=(4, 8)))
    before = mha(x, x, x).data
    mha.w_k.data[:, 4:] *= 3.0
    after = mha(x, x, x).data
    assert np.array_equal(before[:, :4], after[:, :4])
    assert not np.allclose(before[:, 4:], after[:, 4:])


def test_sublayer_zero_map_is_layer_norm_and_rejects_shape_change():
    init = Initializer(0)
    norm = LayerNorm(6, init, "n")
    x = Tensor(np.random.default_rng(0).normal(size=(3, 6)))
    out = sublayer(x, lambda t: t * 0.0, norm)
    np.testing.assert_array_equal(out.data, norm(x).data)
    np.testing.assert_allclose(out.data.mean(-1), 0.0, atol=1e-12)
    with pytest.raises(ad.ContractError):
        Sublayer(6, init, "s")(x, Tensor(np.zeros((3, 5))))


def test_feed_forward_shape_and_relu():
    ffn = FeedForward(4, 8, Initializer(0), "f")
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
    assert ffn(x).shape == (2, 3, 4)


def test_dropout_object_follows_training_flag():
    drop = Dropout(0.5, seed=0)
    x = Tensor(np.ones((10, 10)))
    assert drop(x) is x
    drop.training = True
    assert (drop(x).data == 0).any()
    with pytest.raises(ConfigurationError):
        Dropout(1.0)


def test_positional_encoding(frozen):
    pe = positional_encoding(7, 8)
    assert pe.shape == (7, 8)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])
    assert np.abs(pe).max() <= 1.0
    np.testing.assert_allclose((positional_encoding(50, 8) ** 2).sum(-1), frozen["pe_norms_d8"], atol=1e-9)
    np.testing.assert_allclose((positional_encoding(50, 6) ** 2).sum(-1), frozen["pe_norms_d6"], atol=1e-9)
    assert not pe.flags.writeable
    with pytest.raises(ad.ContractError):
        positional_encoding(0, 8)


def test_encoder_layer_respects_padding():
    layer = EncoderLayer(8, 2, 16, Initializer(0), "e")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 5, 8))
    pad = np.array([[False, False, False, True, True]])
    a = layer(Tensor(x), AttentionMask(key_padding=pad)).data
    x2 = x.copy()
    x2[0, 3:] = rng.normal(size=(2, 8))
    b = layer(Tensor(x2), AttentionMask(key_padding=pad)).data
    assert np.array_equal(a[0, :3], b[0, :3])


def test_attention_gradients():
    for r in attention_suite():
        assert r.passed, (r.group, r.max_rel_error)
