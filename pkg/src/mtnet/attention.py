"""Attention with the residual folded in: single-head, masked, cross,
concatenating multi-head, and the kappa/alpha weighted multi-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ConfigError
from .tensor import Tensor


def _attention_weights(q: Tensor, kv: Tensor, d: int, validity=None) -> Tensor:
    logits = T.scale(T.matmul(q, T.transpose(kv)), 1.0 / math.sqrt(d))
    if validity is not None:
        logits = T.masked_fill(logits, validity)
    return T.softmax_rows(logits)


def self_attention_residual(e: Tensor, d: int) -> Tensor:
    """(I + softmax(e e^T / sqrt(d))) e, computed as e + softmax(.) e."""
    return T.add(e, T.matmul(_attention_weights(e, e, d), e))


def masked_self_attention_residual(x: Tensor, validity, d: int) -> Tensor:
    valid = np.asarray(validity, dtype=bool)
    if valid.shape != (x.rows, x.rows):
        raise T.ShapeError(f"validity {valid.shape} does not match {x.rows} rows")
    if not valid.any(axis=1).all():
        raise T.DegenerateMaskError("a validity row has no valid entry")
    return T.add(x, T.matmul(_attention_weights(x, x, d, valid), x))


def cross_attention_residual(q: Tensor, kv: Tensor, d: int) -> Tensor:
    if q.cols != kv.cols:
        raise T.ShapeError(f"cross attention: {q.shape} vs {kv.shape}")
    return T.add(q, T.matmul(_attention_weights(q, kv, d), kv))


def causal_validity(m: int) -> np.ndarray:
    """Lower-triangular validity grid (diagonal and below are valid)."""
    return np.tril(np.ones((m, m), dtype=bool))


@dataclass
class HeadProjections:
    z1: Tensor
    z2: Tensor
    z3: Tensor
    z4: Optional[Tensor] = None  # per-head output map, weighted mode only


@dataclass
class AttentionWeightsSimplex:
    kappa_logits: Tensor
    alpha_logits: Tensor

    def kappa(self) -> Tensor:
        return T.softmax_rows(self.kappa_logits)

    def alpha(self) -> Tensor:
        return T.softmax_rows(self.alpha_logits)


@dataclass
class AttentionParams:
    """One attention sublayer: P heads plus either a joint output map
    (concat mode) or simplex weights with per-head output maps (weighted)."""

    heads: list
    z4_joint: Optional[Tensor] = None
    simplex: Optional[AttentionWeightsSimplex] = None

    @property
    def mode(self) -> str:
        return "weighted" if self.simplex is not None else "concat"


def _uniform(rng: np.random.Generator, rows: int, cols: int, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def init_attention(rng: np.random.Generator, d: int, P: int, mode: str = "concat") -> AttentionParams:
    if P < 1 or d % P:
        raise ConfigError(f"d={d} is not divisible by P={P}")
    d_p = d // P
    bound = 1.0 / math.sqrt(d)
    heads = []
    for _ in range(P):
        z4 = _uniform(rng, d_p, d, bound) if mode == "weighted" else None
        heads.append(HeadProjections(_uniform(rng, d, d_p, bound), _uniform(rng, d, d_p, bound),
                                     _uniform(rng, d, d_p, bound), z4))
    if mode == "weighted":
        simplex = AttentionWeightsSimplex(Tensor(np.zeros((1, P)), requires_grad=True),
                                          Tensor(np.zeros((1, P)), requires_grad=True))
        return AttentionParams(heads, simplex=simplex)
    if mode != "concat":
        raise ConfigError(f"unknown attention mode {mode!r}")
    return AttentionParams(heads, z4_joint=_uniform(rng, d, d, bound))


def _stack(heads: Sequence[HeadProjections], attr: str) -> Tensor:
    parts = [getattr(h, attr) for h in heads]
    return parts[0] if len(parts) == 1 else T.concat_cols(parts)


def _check_heads(e_q: Tensor, heads: Sequence[HeadProjections]) -> None:
    if not heads:
        raise ConfigError("at least one head is required")
    d = e_q.cols
    d_p = heads[0].z1.cols
    if d_p * len(heads) != d:
        raise ConfigError(f"d={d} is not P={len(heads)} heads of width {d_p}")


def _head_outputs(e_q, e_kv, heads, validity, groups, dropout, rng):
    """Concatenated (e_q + A_i e_kv) Z3_i for all heads, (G*m x d)."""
    d = e_q.cols
    q = T.matmul(e_q, _stack(heads, "z1"))
    k = T.matmul(e_kv, _stack(heads, "z2"))
    z3 = _stack(heads, "z3")
    v = T.matmul(e_kv, z3)
    if validity is not None:
        G = groups
        m, n = e_q.rows // G, e_kv.rows // G
        valid = np.broadcast_to(np.asarray(validity, dtype=bool), (G, m, n))
        if not valid.any(axis=2).all():
            raise T.DegenerateMaskError("a validity row has no valid entry")
    att = T.grouped_attention(q, k, v, heads=len(heads), groups=groups, validity=validity,
                              scale_by=math.sqrt(d), dropout_rate=dropout, rng=rng)
    resid = v if e_q is e_kv else T.matmul(e_q, z3)
    return T.add(resid, att)


def multi_head_attention(e_q: Tensor, e_kv: Tensor, heads: Sequence[HeadProjections], z4_joint: Tensor,
                         validity=None, groups: int = 1, dropout: float = 0.0, rng=None) -> Tensor:
    """Concat_i[(I + softmax(mask(e_q Z1_i Z2_i^T e_kv^T / sqrt(d)))) e_kv Z3_i] Z4.

    In the cross case (``e_q`` is not ``e_kv``) the identity term is the
    query's own projection ``e_q Z3_i``. ``groups`` splits both inputs into
    that many equal row blocks that attend only within their block.
    """
    _check_heads(e_q, heads)
    return T.matmul(_head_outputs(e_q, e_kv, heads, validity, groups, dropout, rng), z4_joint)


def weighted_multi_attention(e: Tensor, heads: Sequence[HeadProjections], w: AttentionWeightsSimplex,
                             validity=None, groups: int = 1, dropout: float = 0.0, rng=None,
                             e_kv: Optional[Tensor] = None) -> Tensor:
    """sum_i alpha_i * kappa_i * (I + softmax(.)) e Z3_i Z4_i."""
    _check_heads(e, heads)
    kv = e if e_kv is None else e_kv
    h = _head_outputs(e, kv, heads, validity, groups, dropout, rng)
    d_p = heads[0].z1.cols
    weights = T.mul(w.kappa(), w.alpha())  # 1 x P
    # row i*d_p + j of the stacked per-head output maps is scaled by weight i
    expand = np.kron(np.eye(len(heads)), np.ones((1, d_p)))
    row_scale = T.transpose(T.matmul(weights, Tensor(expand)))  # P*d_p x 1
    z4 = heads[0].z4 if len(heads) == 1 else T.concat_rows([hd.z4 for hd in heads])
    return T.matmul(h, T.mul(z4, row_scale))


def attend(params: AttentionParams, e_q: Tensor, e_kv: Tensor, validity=None, groups: int = 1,
           dropout: float = 0.0, rng=None) -> Tensor:
    if params.simplex is not None:
        return weighted_multi_attention(e_q, params.heads, params.simplex, validity, groups,
                                        dropout, rng, e_kv=None if e_kv is e_q else e_kv)
    return multi_head_attention(e_q, e_kv, params.heads, params.z4_joint, validity, groups, dropout, rng)
