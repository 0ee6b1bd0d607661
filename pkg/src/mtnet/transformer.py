"""Embeddings, positional encodings and the encoder/decoder stacks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, attend, causal_validity, init_attention
from .config import ConfigError
from .tensor import Tensor


class VocabularyError(IndexError):
    pass


@dataclass
class RunMode:
    """Forward-pass switches. Dropout is active only when ``train`` is set."""

    train: bool = False
    dropout: float = 0.0
    rng: Optional[np.random.Generator] = None
    eps: float = 1e-5

    @property
    def rate(self) -> float:
        return self.dropout if self.train and self.rng is not None else 0.0


EVAL = RunMode()


@dataclass
class Norm:
    gain: Tensor
    bias: Tensor


@dataclass
class FeedForward:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ffn: FeedForward
    norm_attn: Norm
    norm_ffn: Norm


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn: FeedForward
    norm_self: Norm
    norm_cross: Norm
    norm_ffn: Norm


@dataclass
class EmbeddingTable:
    b_emb: Tensor
    input_proj: Optional[Tensor] = None

    @property
    def vocab_size(self) -> int:
        return self.b_emb.rows


def init_norm(d: int) -> Norm:
    return Norm(Tensor(np.ones((1, d)), requires_grad=True), Tensor(np.zeros((1, d)), requires_grad=True))


def _uniform(rng, rows, cols, fan_in) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def init_ffn(rng, d: int, d_f: int) -> FeedForward:
    if d_f <= d:
        raise ConfigError(f"d_f={d_f} must exceed d={d}")
    return FeedForward(_uniform(rng, d, d_f, d), _uniform(rng, 1, d_f, d),
                       _uniform(rng, d_f, d, d_f), _uniform(rng, 1, d, d_f))


def init_encoder_layer(rng, d: int, d_f: int, P: int, mode: str = "concat") -> EncoderLayerParams:
    return EncoderLayerParams(init_attention(rng, d, P, mode), init_ffn(rng, d, d_f), init_norm(d), init_norm(d))


def init_decoder_layer(rng, d: int, d_f: int, P: int, mode: str = "concat") -> DecoderLayerParams:
    return DecoderLayerParams(init_attention(rng, d, P, mode), init_attention(rng, d, P, mode),
                              init_ffn(rng, d, d_f), init_norm(d), init_norm(d), init_norm(d))


def init_embeddings(rng, vocab_size: int, d_emb: int, d: int) -> EmbeddingTable:
    table = _uniform(rng, vocab_size, d_emb, d_emb)
    proj = _uniform(rng, d_emb, d, d_emb) if d_emb != d else None
    return EmbeddingTable(table, proj)


def layer_norm(x: Tensor, norm: Norm, mode: RunMode = EVAL) -> Tensor:
    return T.layer_norm_rows(x, norm.gain, norm.bias, mode.eps)


def feed_forward(x: Tensor, ffn: FeedForward) -> Tensor:
    h = T.relu(T.add_bias_rows(T.matmul(x, ffn.w1), ffn.b1))
    return T.add_bias_rows(T.matmul(h, ffn.w2), ffn.b2)


def sinusoidal_pe(max_pos: int, d: int) -> np.ndarray:
    if d % 2:
        raise ConfigError(f"sinusoidal encodings need an even width, got d={d}")
    pos = np.arange(max_pos, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.empty((max_pos, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def embed_and_scale(token_ids, table: EmbeddingTable, d: int) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.vocab_size):
        raise VocabularyError(f"token id out of range for vocabulary of size {table.vocab_size}")
    x = T.gather_rows(table.b_emb, ids)
    if table.input_proj is not None:
        x = T.matmul(x, table.input_proj)
    return T.scale(x, math.sqrt(d))


def add_positions(x: Tensor, block: int, mode: RunMode = EVAL) -> Tensor:
    """Add sinusoidal encodings for positions 0..block-1 to every row block."""
    pe = sinusoidal_pe(block, x.cols)
    reps = x.rows // block
    x = T.add(x, Tensor(np.tile(pe, (reps, 1))))
    return T.dropout(x, mode.rate, mode.rng)


def encoder_layer_forward(e_prev: Tensor, params: EncoderLayerParams, mode: RunMode = EVAL,
                          validity=None, groups: int = 1) -> Tensor:
    a = attend(params.attn, e_prev, e_prev, validity, groups, mode.rate, mode.rng)
    e_hat = layer_norm(a, params.norm_attn, mode)
    f = T.dropout(feed_forward(e_hat, params.ffn), mode.rate, mode.rng)
    return layer_norm(T.add(e_hat, f), params.norm_ffn, mode)


def encoder_forward(x: Tensor, layers: Sequence[EncoderLayerParams], mode: RunMode = EVAL,
                    validity=None, groups: int = 1) -> Tensor:
    if not layers:
        raise ConfigError("encoder needs at least one layer")
    e = x
    for p in layers:
        e = encoder_layer_forward(e, p, mode, validity, groups)
    return e


def decoder_layer_forward(d_prev: Tensor, y_enc: Tensor, params: DecoderLayerParams, causal_mask=None,
                          mode: RunMode = EVAL, cross_validity=None, groups: int = 1) -> Tensor:
    m = d_prev.rows // groups
    if causal_mask is None:
        causal_mask = causal_validity(m)
    s = attend(params.self_attn, d_prev, d_prev, causal_mask, groups, mode.rate, mode.rng)
    d_hat = layer_norm(s, params.norm_self, mode)
    c = attend(params.cross_attn, d_hat, y_enc, cross_validity, groups, mode.rate, mode.rng)
    d_tilde = layer_norm(c, params.norm_cross, mode)
    f = T.dropout(feed_forward(d_tilde, params.ffn), mode.rate, mode.rng)
    return layer_norm(T.add(d_tilde, f), params.norm_ffn, mode)


def decoder_forward(x_target: Tensor, y_enc: Tensor, layers: Sequence[DecoderLayerParams],
                    mode: RunMode = EVAL, cross_validity=None, groups: int = 1) -> Tensor:
    if not layers:
        raise ConfigError("decoder needs at least one layer")
    causal = causal_validity(x_target.rows // groups)
    out = x_target
    for p in layers:
        out = decoder_layer_forward(out, y_enc, p, causal, mode, cross_validity, groups)
    return out


def output_logits(d_final: Tensor, table: EmbeddingTable) -> Tensor:
    """Tied output: d_final (input_proj^T) B_emb^T; row k scores position k."""
    h = d_final
    if table.input_proj is not None:
        h = T.matmul(h, T.transpose(table.input_proj))
    if h.cols != table.b_emb.cols:
        raise T.ShapeError(f"decoder width {h.cols} does not match embedding width {table.b_emb.cols}")
    return T.matmul(h, T.transpose(table.b_emb))


def output_distribution(d_final: Tensor, table: EmbeddingTable) -> Tensor:
    return T.softmax_rows(output_logits(d_final, table))


def output_log_probs(d_final: Tensor, table: EmbeddingTable) -> Tensor:
    return T.log_softmax_rows(output_logits(d_final, table))
