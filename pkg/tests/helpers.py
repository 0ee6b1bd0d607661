"""Small shared builders for training-related tests."""

import dataclasses

import numpy as np

from mtnet.config import desk_profile
from mtnet.data import make_batches, unroll_pairs
from mtnet.mtn import build_model
from mtnet.synthetic import next_query_sessions, synthetic_vocab


def tiny_config(**kw):
    base = dict(d=8, d_f=16, d_emb=8, P=2, L=1, L_dec=1, L_levels=[1], vocab_size=20, max_query_len=4,
                dropout=0.1, label_smoothing=0.05, warmup_steps=10, batch_size=4, epochs=2, seed=7)
    base.update(kw)
    return dataclasses.replace(desk_profile(), **base)


def tiny_task(n_sessions=8, data_seed=0, **kw):
    """(config, model, batches) for a short next-query run."""
    config = tiny_config(**kw)
    vocab = synthetic_vocab(20)
    pairs = [p for s in next_query_sessions(n_sessions, 20, seed=data_seed) for p in unroll_pairs(s)]
    batches = make_batches(pairs, vocab, config.max_query_len, config.batch_size, seed=data_seed)
    model = build_model(config, np.random.default_rng(config.seed))
    return config, model, batches
