"""Small deterministic session corpora for smoke experiments."""

from __future__ import annotations

import numpy as np

from .data import RESERVED, PairExample, Session, Vocabulary


def synthetic_vocab(vocab_size: int = 20) -> Vocabulary:
    """``vocab_size`` ids in total: the reserved symbols plus t0, t1, ..."""
    n = vocab_size - len(RESERVED)
    if n < 2:
        raise ValueError("vocab_size leaves fewer than two content tokens")
    return Vocabulary([f"t{i}" for i in range(n)])


def next_query_sessions(n_sessions: int = 32, vocab_size: int = 20, n_queries: int = 3,
                        query_len: int = 3, seed: int = 0) -> list:
    """Sessions where each query is the previous one with every token
    shifted by one (mod the content vocabulary)."""
    rng = np.random.default_rng(seed)
    k = vocab_size - len(RESERVED)
    sessions = []
    for _ in range(n_sessions):
        base = rng.integers(0, k, size=query_len)
        queries = [[f"t{(x + j) % k}" for x in base] for j in range(n_queries)]
        sessions.append(Session(queries))
    return sessions


def cross_query_pairs(n_sessions: int = 32, vocab_size: int = 20, query_len: int = 3,
                      seed: int = 0) -> list:
    """Two-query prefixes whose target interleaves both queries:
    ``[q1[0], q2[0], q1[1], q2[1], ...]`` truncated to ``query_len`` tokens.
    No single query determines the target."""
    rng = np.random.default_rng(seed)
    k = vocab_size - len(RESERVED)
    pairs = []
    for _ in range(n_sessions):
        q1 = [f"t{x}" for x in rng.integers(0, k, size=query_len)]
        q2 = [f"t{x}" for x in rng.integers(0, k, size=query_len)]
        mixed = [tok for pair in zip(q1, q2) for tok in pair][:query_len]
        pairs.append(PairExample([q1, q2], mixed))
    return pairs
