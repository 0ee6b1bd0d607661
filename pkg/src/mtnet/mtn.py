"""Multiresolution Transformer: query-level encoder, query projection,
masked session encoder, Add & Norm fusion, K-level stacking, and the full
encoder-decoder models (MTN and the flat Transformer baseline)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import causal_validity
from .config import ConfigError, ModelConfig
from .tensor import Tensor
from .transformer import (EVAL, EncoderLayerParams, Norm, RunMode, add_positions, decoder_forward,
                          embed_and_scale, encoder_forward, init_decoder_layer, init_embeddings, init_encoder_layer,
                          init_norm, layer_norm, output_log_probs)

# Session-level layers have the same parameter layout as encoder layers;
# only the validity grid (causal over queries) differs.
SessionEncoderLayerParams = EncoderLayerParams


@dataclass
class QueryProjection:
    w_proj: Tensor

    @property
    def width(self) -> int:
        return self.w_proj.cols

    @classmethod
    def mean_pooling(cls, n: int) -> "QueryProjection":
        return cls(Tensor(np.full((1, n), 1.0 / n), requires_grad=True))


@dataclass
class SessionBatch:
    """B examples sharing the same number of source queries S.

    ``queries`` is an int array (B, S, n_max), padded with the pad id;
    ``pad_mask`` marks real tokens. ``target_in`` starts with <bos>,
    ``target_out`` ends with <eos>; both (B, m), padded. ``hierarchy``
    describes the grouping above the query level for K > 2 (see
    :func:`k_level_encode`).
    """

    queries: np.ndarray
    pad_mask: np.ndarray
    target_in: Optional[np.ndarray] = None
    target_out: Optional[np.ndarray] = None
    hierarchy: Optional[list] = None

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.int64)
        if self.queries.ndim == 2:
            self.queries = self.queries[None]
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool).reshape(self.queries.shape)
        if self.queries.shape[1] < 1:
            raise ValueError("a session needs at least one query")
        if not self.pad_mask.any(axis=2).all():
            raise ValueError("every query needs at least one real token")

    @property
    def size(self) -> int:
        return self.queries.shape[0]

    @property
    def n_sessions_queries(self) -> int:
        return self.queries.shape[1]

    @property
    def n_max(self) -> int:
        return self.queries.shape[2]


@dataclass
class Memory:
    """Encoder output handed to the decoder: (B*n x d) rows in B blocks."""

    rows: Tensor
    groups: int
    validity: Optional[np.ndarray] = None


def query_project(y_query: Tensor, w: QueryProjection) -> Tensor:
    if y_query.rows % w.width:
        raise T.ShapeError(f"query rows {y_query.rows} do not match projection width {w.width}")
    return T.pool_rows(y_query, w.w_proj, w.width)


def session_encoder_forward(query_codes: Tensor, layers: Sequence[SessionEncoderLayerParams],
                            mode: RunMode = EVAL, groups: int = 1) -> Tensor:
    """Causal (lower-triangular) encoder over query codes; codes already carry PE."""
    if not layers:
        return query_codes
    s = query_codes.rows // groups
    return encoder_forward(query_codes, layers, mode, causal_validity(s), groups)


def fuse_add_norm(y_query_tokens: Tensor, session_code: Tensor, norm: Norm, mode: RunMode = EVAL) -> Tensor:
    """psi(Y + broadcast(code)). ``session_code`` has one row per block of
    ``y_query_tokens.rows // session_code.rows`` token rows."""
    if y_query_tokens.rows % session_code.rows or y_query_tokens.cols != session_code.cols:
        raise T.ShapeError(f"fusion: tokens {y_query_tokens.shape} vs codes {session_code.shape}")
    k = y_query_tokens.rows // session_code.rows
    broadcast = session_code if k == 1 else T.repeat_rows(session_code, k)
    return layer_norm(T.add(y_query_tokens, broadcast), norm, mode)


def _levels_of(config: ModelConfig) -> list:
    return list(config.L_levels)


class MTNModel:
    """Multiresolution Transformer encoder plus a standard decoder.

    With ``K == 2`` the encoder is: per-query Transformer encoder, query
    projection, query PE, masked session encoder, Add & Norm. The decoder
    cross-attends to the fused token rows of all source queries.
    """

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        config.validate()
        if config.vocab_size < 1:
            raise ConfigError("vocab_size must be set before building a model")
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        self.embed = init_embeddings(rng, c.vocab_size, c.d_emb, c.d)
        self.query_layers = [init_encoder_layer(rng, c.d, c.d_f, c.P, c.attention_mode) for _ in range(c.L)]
        widths = [c.max_query_len] + list(c.level_widths)
        if c.K > 2 and not c.level_widths:
            raise ConfigError("K > 2 needs level_widths for the upper projections")
        self.projections = [QueryProjection.mean_pooling(w) for w in widths]
        self.level_layers = [[init_encoder_layer(rng, c.d, c.d_f, c.P, c.attention_mode) for _ in range(n)]
                             for n in _levels_of(c)]
        self.fusion_norm = init_norm(c.d)
        self.decoder_layers = [init_decoder_layer(rng, c.d, c.d_f, c.P, c.attention_mode) for _ in range(c.L_dec)]

    # parameters -----------------------------------------------------------
    def named_parameters(self) -> list:
        return (T.named_parameters(self.embed, "embed")
                + T.named_parameters(self.query_layers, "query")
                + T.named_parameters(self.projections, "proj")
                + T.named_parameters(self.level_layers, "level")
                + T.named_parameters(self.fusion_norm, "fusion")
                + T.named_parameters(self.decoder_layers, "decoder"))

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    @property
    def session_layers(self) -> list:
        return self.level_layers[0]

    # encoder ----------------------------------------------------------------
    def query_level(self, batch: SessionBatch, mode: RunMode = EVAL) -> Tensor:
        """Token representations Y_1 for every query: (B*S*n_max x d)."""
        B, S, n = batch.queries.shape
        if n != self.projections[0].width:
            raise T.ShapeError(f"queries padded to {n}, projection expects {self.projections[0].width}")
        x = embed_and_scale(batch.queries.reshape(-1), self.embed, self.config.d)
        x = add_positions(x, n, mode)
        key_valid = batch.pad_mask.reshape(B * S, 1, n)
        return encoder_forward(x, self.query_layers, mode, key_valid, groups=B * S)

    def encode(self, batch: SessionBatch, mode: RunMode = EVAL) -> Memory:
        if batch.hierarchy is not None or self.config.K > 2:
            fused = k_level_encode(batch, self, mode)
        else:
            fused = mtn_encode(batch, self, mode)
        B, S, n = batch.queries.shape
        return Memory(fused, B, batch.pad_mask.reshape(B, 1, S * n))

    # decoder ----------------------------------------------------------------
    def decode_log_probs(self, memory: Memory, target_in, mode: RunMode = EVAL) -> Tensor:
        return _decode(self, memory, target_in, mode)


def _decode(model, memory: Memory, target_in, mode: RunMode) -> Tensor:
    tgt = np.asarray(target_in, dtype=np.int64)
    if tgt.ndim == 1:
        tgt = tgt[None]
    B, m = tgt.shape
    if B != memory.groups:
        raise T.ShapeError(f"{B} target rows for {memory.groups} encoded examples")
    x = embed_and_scale(tgt.reshape(-1), model.embed, model.config.d)
    x = add_positions(x, m, mode)
    out = decoder_forward(x, memory.rows, model.decoder_layers, mode, memory.validity, groups=B)
    return output_log_probs(out, model.embed)


def mtn_encode(batch: SessionBatch, model: MTNModel, mode: RunMode = EVAL) -> Tensor:
    """Fused token representations for every query, stacked (B*S*n_max x d).

    Output rows for query q depend only on queries 1..q of the same session.
    """
    B, S, n = batch.queries.shape
    y1 = model.query_level(batch, mode)
    codes = query_project(y1, model.projections[0])  # (B*S x d)
    layers = model.session_layers
    if layers:
        codes = add_positions(codes, S, mode)
        codes = session_encoder_forward(codes, layers, mode, groups=B)
    return fuse_add_norm(y1, codes, model.fusion_norm, mode)


def _pad_blocks(x: Tensor, sizes: Sequence[int], width: int) -> tuple[Tensor, np.ndarray]:
    """Rearrange consecutive row runs of ``sizes`` into blocks of ``width``
    rows, zero-filled; returns the padded tensor and a row-validity vector."""
    if max(sizes) > width:
        raise ConfigError(f"a group of {max(sizes)} units exceeds the configured width {width}")
    pieces, valid = [], []
    start = 0
    zeros = Tensor(np.zeros((1, x.cols)))
    for s in sizes:
        pieces.append(T.slice_rows(x, start, start + s))
        pieces.extend([zeros] * (width - s))
        valid.extend([True] * s + [False] * (width - s))
        start += s
    if start != x.rows:
        raise ConfigError(f"group sizes sum to {start}, expected {x.rows}")
    return T.concat_rows(pieces), np.array(valid)


def k_level_encode(batch: SessionBatch, model: MTNModel, mode: RunMode = EVAL) -> Tensor:
    """General K-level encoder.

    ``batch.hierarchy`` is a list of K-1 partitions. Partition r (0-based)
    splits the units of level r+1 into the consecutive sequences encoded by
    the masked encoder at level r+2; the last partition must be a single
    sequence. For K = 2 the default hierarchy is ``[[S]]``. Each upper level
    pools its (zero-padded) sequences with its own projection, adds PE and
    runs a causal encoder. The top-level code of each unit is added back to
    all token rows below it and normalized.
    """
    B, S, n = batch.queries.shape
    hierarchy = batch.hierarchy if batch.hierarchy is not None else [[S]]
    K = model.config.K
    if len(hierarchy) != K - 1:
        raise ConfigError(f"hierarchy has {len(hierarchy)} levels, model has K-1 = {K - 1}")
    if len(hierarchy[-1]) != 1:
        raise ConfigError("the top level must be a single sequence")
    y1 = model.query_level(batch, mode)
    units = query_project(y1, model.projections[0])  # (B*S x d)
    n_units = S
    # owner[u] = index of the current-level unit that query u belongs to
    owner = np.arange(S)
    for r, sizes in enumerate(hierarchy):
        if sum(sizes) != n_units:
            raise ConfigError(f"level {r + 2}: group sizes {sizes} do not cover {n_units} units")
        top = r == len(hierarchy) - 1
        width = sizes[0] if top else model.projections[r + 1].width
        per_example = []
        for b in range(B):
            block = T.slice_rows(units, b * n_units, (b + 1) * n_units)
            padded, valid = _pad_blocks(block, sizes, width)
            per_example.append(padded)
        seqs = per_example[0] if B == 1 else T.concat_rows(per_example)
        layers = model.level_layers[r]
        if layers:
            seqs = add_positions(seqs, width, mode)
            seqs = session_encoder_forward(seqs, layers, mode, groups=B * len(sizes))
        if top:
            units = seqs
            break
        row_valid = np.tile(valid, B).astype(np.float64)[:, None]
        seqs = T.mul(seqs, Tensor(row_valid))  # zero padding before projection
        proj = model.projections[r + 1]
        units = query_project(seqs, proj)  # (B*len(sizes) x d)
        group_of = np.repeat(np.arange(len(sizes)), sizes)
        owner = group_of[owner]
        n_units = len(sizes)
    # broadcast each query's top-level code to its n token rows
    top_rows = (np.arange(B)[:, None] * n_units + owner[None, :]).reshape(-1)
    codes = T.gather_rows(units, top_rows)  # (B*S x d)
    return fuse_add_norm(y1, codes, model.fusion_norm, mode)


def mtn_forward(batch: SessionBatch, target_prefix, model, mode: RunMode = EVAL) -> Tensor:
    """Per-position output distributions (B*m x |V|) for the target prefix."""
    memory = model.encode(batch, mode)
    return T.exp(model.decode_log_probs(memory, target_prefix, mode))


class TransformerModel:
    """Flat baseline: one Transformer encoder over the concatenated,
    padded session tokens, and the same decoder as the MTN."""

    def __init__(self, config: ModelConfig, rng: Optional[np.random.Generator] = None):
        config.validate()
        if config.vocab_size < 1:
            raise ConfigError("vocab_size must be set before building a model")
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        c = config
        self.embed = init_embeddings(rng, c.vocab_size, c.d_emb, c.d)
        self.encoder_layers = [init_encoder_layer(rng, c.d, c.d_f, c.P, c.attention_mode) for _ in range(c.L)]
        self.decoder_layers = [init_decoder_layer(rng, c.d, c.d_f, c.P, c.attention_mode) for _ in range(c.L_dec)]

    def named_parameters(self) -> list:
        return (T.named_parameters(self.embed, "embed")
                + T.named_parameters(self.encoder_layers, "encoder")
                + T.named_parameters(self.decoder_layers, "decoder"))

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def encode(self, batch: SessionBatch, mode: RunMode = EVAL) -> Memory:
        B, S, n = batch.queries.shape
        x = embed_and_scale(batch.queries.reshape(-1), self.embed, self.config.d)
        x = add_positions(x, S * n, mode)
        key_valid = batch.pad_mask.reshape(B, 1, S * n)
        y = encoder_forward(x, self.encoder_layers, mode, key_valid, groups=B)
        return Memory(y, B, key_valid)

    def decode_log_probs(self, memory: Memory, target_in, mode: RunMode = EVAL) -> Tensor:
        return _decode(self, memory, target_in, mode)


def build_model(config: ModelConfig, rng: Optional[np.random.Generator] = None):
    if config.architecture == "transformer":
        return TransformerModel(config, rng)
    return MTNModel(config, rng)
