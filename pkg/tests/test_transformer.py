import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtnet import tensor as T
from mtnet.attention import HeadProjections
from mtnet.config import ConfigError
from mtnet.oracle import prop2_unrolled, prop3_unrolled
from mtnet.tensor import Tensor, finite_diff_check
from mtnet.training import label_smoothed_ce
from mtnet.transformer import (EmbeddingTable, VocabularyError, decoder_forward, decoder_layer_forward,
                               embed_and_scale, encoder_forward, encoder_layer_forward, init_decoder_layer,
                               init_embeddings, init_encoder_layer, output_distribution, output_logits,
                               sinusoidal_pe)


def psi(x, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + eps)


def randomized(layers, rng):
    for _, t in T.named_parameters(layers):
        t.data = rng.uniform(-1, 1, size=t.shape)
    return layers


# embeddings and positions ------------------------------------------------------------

def test_embed_and_scale(rng):
    table = EmbeddingTable(Tensor(rng.normal(size=(6, 4))))
    out = embed_and_scale([3, 3, 5], table, 4).data
    assert np.array_equal(out[0], 2 * table.b_emb.data[3])
    assert np.array_equal(out[0], out[1])
    one = EmbeddingTable(Tensor(rng.normal(size=(6, 1))))
    assert np.array_equal(embed_and_scale([2], one, 1).data, one.b_emb.data[[2]])
    with pytest.raises(VocabularyError):
        embed_and_scale([6], table, 4)


def test_embedding_with_input_projection(rng):
    table = init_embeddings(rng, 7, 3, 4)
    out = embed_and_scale([1, 2], table, 4).data
    assert np.allclose(out, 2 * table.b_emb.data[[1, 2]] @ table.input_proj.data, atol=1e-15)


def test_sinusoidal_pe():
    pe = sinusoidal_pe(20, 8)
    assert np.array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])
    assert np.array_equal(pe[:, 0], np.sin(np.arange(20)))
    assert np.all(np.abs(pe) <= 1)
    with pytest.raises(ConfigError):
        sinusoidal_pe(3, 5)


# encoder -----------------------------------------------------------------------------

def test_encoder_single_token_doubles_before_norm(rng):
    layer = randomized(init_encoder_layer(rng, 4, 8, 2), rng)
    x = rng.normal(size=(1, 4))
    z3 = np.hstack([h.z3.data for h in layer.attn.heads])
    a = 2 * x @ z3 @ layer.attn.z4_joint.data
    g, b = layer.norm_attn.gain.data, layer.norm_attn.bias.data
    e_hat = psi(a) * g + b
    ffn = layer.ffn
    f = np.maximum(e_hat @ ffn.w1.data + ffn.b1.data, 0) @ ffn.w2.data + ffn.b2.data
    ref = psi(e_hat + f) * layer.norm_ffn.gain.data + layer.norm_ffn.bias.data
    assert np.abs(encoder_layer_forward(Tensor(x), layer).data - ref).max() < 1e-12


def test_encoder_zero_ffn_gives_normed_attention(rng):
    layer = randomized(init_encoder_layer(rng, 4, 8, 2), rng)
    for name in ("w1", "b1", "w2", "b2"):
        t = getattr(layer.ffn, name)
        t.data = np.zeros_like(t.data)
    layer.norm_attn.gain.data[:] = 1
    layer.norm_attn.bias.data[:] = 0
    layer.norm_ffn.gain.data[:] = 1
    layer.norm_ffn.bias.data[:] = 0
    x = rng.normal(size=(3, 4))
    out = encoder_layer_forward(Tensor(x), layer).data
    heads = layer.attn.heads
    concat = np.hstack([(np.eye(3) + _softmax(x @ h.z1.data @ h.z2.data.T @ x.T / 2)) @ x @ h.z3.data
                        for h in heads])
    e_hat = psi(concat @ layer.attn.z4_joint.data)
    assert np.abs(out - psi(e_hat)).max() < 1e-12


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_encoder_stack_matches_oracle(rng):
    layers = randomized([init_encoder_layer(rng, 8, 12, 2) for _ in range(2)], rng)
    x = rng.normal(size=(4, 8))
    assert len(prop2_unrolled(x, layers[:1])) == 1
    assert np.array_equal(encoder_forward(Tensor(x), layers[:1]).data,
                          encoder_layer_forward(Tensor(x), layers[0]).data)
    oracle = prop2_unrolled(x, layers)
    e = Tensor(x)
    for layer, ref in zip(layers, oracle):
        e = encoder_layer_forward(e, layer)
        assert np.abs(e.data - ref).max() < 1e-10


@given(seed=st.integers(0, 2**31))
def test_encoder_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    layers = randomized([init_encoder_layer(r, 4, 6, 2) for _ in range(2)], r)
    x = r.normal(size=(5, 4))
    perm = r.permutation(5)
    a = encoder_forward(Tensor(x[perm]), layers).data
    b = encoder_forward(Tensor(x), layers).data[perm]
    assert np.abs(a - b).max() < 1e-10


def test_encoder_needs_a_layer():
    with pytest.raises(ConfigError):
        encoder_forward(Tensor(np.zeros((2, 4))), [])


# decoder -----------------------------------------------------------------------------

def test_decoder_matches_oracle_and_single_layer(rng):
    layers = randomized([init_decoder_layer(rng, 4, 6, 2) for _ in range(2)], rng)
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    one = decoder_forward(Tensor(x), Tensor(y), layers[:1]).data
    assert np.array_equal(one, decoder_layer_forward(Tensor(x), Tensor(y), layers[0]).data)
    oracle = prop3_unrolled(x, y, layers)
    out = decoder_forward(Tensor(x), Tensor(y), layers).data
    assert np.abs(out - oracle[-1][-1]).max() < 1e-10
    first = decoder_forward(Tensor(x[:1]), Tensor(y), layers).data
    assert np.abs(first - oracle[-1][0]).max() < 1e-10


def test_decoder_identical_memory_rows_add_constant(rng):
    layer = randomized(init_decoder_layer(rng, 4, 6, 1), rng)
    h = layer.cross_attn.heads[0]
    u = rng.normal(size=(1, 4))
    x = rng.normal(size=(3, 4))
    y = np.repeat(u, 4, axis=0)
    # with equal memory rows, cross attention output is (d_hat + u) Z3 Z4 whatever the weights
    out = decoder_layer_forward(Tensor(x), Tensor(y), layer).data
    ref_layer = prop3_unrolled(x, y, [layer])[0][-1]
    assert np.abs(out - ref_layer).max() < 1e-12
    assert h.z3.shape == (4, 4)


@given(seed=st.integers(0, 2**31))
def test_decoder_causality_and_prefix_consistency(seed):
    r = np.random.default_rng(seed)
    layers = randomized([init_decoder_layer(r, 4, 6, 2) for _ in range(2)], r)
    m = 5
    x, y = r.normal(size=(m, 4)), r.normal(size=(3, 4))
    base = decoder_forward(Tensor(x), Tensor(y), layers).data
    for t in range(m - 1):
        x2 = x.copy()
        x2[t + 1:] = r.normal(scale=5, size=x2[t + 1:].shape)
        assert np.abs(decoder_forward(Tensor(x2), Tensor(y), layers).data[: t + 1] - base[: t + 1]).max() <= 1e-12
        assert np.abs(decoder_forward(Tensor(x[: t + 1]), Tensor(y), layers).data - base[: t + 1]).max() <= 1e-12


# output ------------------------------------------------------------------------------

def test_output_distribution(rng):
    table = EmbeddingTable(Tensor(rng.normal(size=(9, 4))))
    dfin = rng.normal(size=(3, 4))
    probs = output_distribution(Tensor(dfin), table).data
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-12)
    assert np.abs(output_logits(Tensor(dfin), table).data - dfin @ table.b_emb.data.T).max() < 1e-12


def test_output_argmax_on_aligned_embedding():
    emb = np.eye(5, 5)
    table = EmbeddingTable(Tensor(emb))
    row = math.sqrt(3.0) * emb[[2]]
    assert int(np.argmax(output_distribution(Tensor(row), table).data)) == 2


def test_tied_output_shares_the_embedding(rng):
    table = init_embeddings(rng, 6, 4, 4)
    before_in = embed_and_scale([1], table, 4).data.copy()
    before_out = output_logits(Tensor(np.ones((1, 4))), table).data.copy()
    table.b_emb.data = table.b_emb.data + 0.5
    assert not np.array_equal(before_in, embed_and_scale([1], table, 4).data)
    assert not np.array_equal(before_out, output_logits(Tensor(np.ones((1, 4))), table).data)


def test_encoder_decoder_gradient(rng):
    enc = randomized([init_encoder_layer(rng, 8, 12, 2) for _ in range(2)], rng)
    dec = randomized([init_decoder_layer(rng, 8, 12, 2) for _ in range(2)], rng)
    table = init_embeddings(rng, 10, 8, 8)
    src = Tensor(rng.normal(size=(3, 8)))
    tgt = Tensor(rng.normal(size=(3, 8)))
    targets = [4, 5, 6]

    def loss(_):
        y = encoder_forward(src, enc)
        out = decoder_forward(tgt, y, dec)
        return label_smoothed_ce(T.log_softmax_rows(output_logits(out, table)), targets, 0.0)

    for x in (src, tgt, enc[0].attn.heads[0].z1, dec[1].cross_attn.z4_joint, dec[0].ffn.w1, table.b_emb):
        # h = 1e-4: some coordinates have gradients near 1e-7, where h = 1e-5 is roundoff-limited
        assert finite_diff_check(loss, x, h=1e-4) < 1e-4


def test_head_projection_shapes(rng):
    layer = init_encoder_layer(rng, 8, 12, 4)
    assert all(isinstance(h, HeadProjections) and h.z1.shape == (8, 2) for h in layer.attn.heads)
    with pytest.raises(ConfigError):
        init_encoder_layer(rng, 8, 8, 4)
