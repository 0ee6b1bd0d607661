import itertools
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtnet.config import ModelConfig
from mtnet.data import EOS_ID
from mtnet.evaluation import (NoCandidateNgramsWarning, beam_decode, beam_search, bleu, brevity_penalty,
                              exact_match, format_metrics, greedy_decode, metrics, ngram_precision)
from mtnet.mtn import SessionBatch, build_model
from mtnet.tensor import Tensor

NEG = -np.inf


class TableModel:
    """Next-token log-probabilities looked up from a function of the prefix."""

    def __init__(self, fn, V=6):
        self.fn, self.V = fn, V
        self.calls = 0

    def encode(self, batch, mode=None):
        return None

    def decode_log_probs(self, memory, ids, mode=None):
        self.calls += 1
        prefix = tuple(int(i) for i in np.asarray(ids)[0])
        rows = np.zeros((len(prefix), self.V))
        rows[-1] = self.fn(prefix)
        return Tensor(rows)


def log_normalize(z):
    z = np.asarray(z, dtype=float)
    finite = np.isfinite(z)
    out = np.full_like(z, -np.inf)
    out[finite] = z[finite] - np.log(np.exp(z[finite]).sum())
    return out


CTX = SessionBatch(np.array([[4]]), np.array([[True]]))


# greedy ----------------------------------------------------------------------------------------

def test_greedy_tie_break_and_eos():
    def fn(prefix):
        if len(prefix) == 1:
            z = np.full(10, -5.0)
            z[5] = z[9] = 0.0
            return z
        return np.where(np.arange(10) == EOS_ID, 0.0, -5.0)

    assert greedy_decode(TableModel(fn, V=10), CTX) == [5]
    eos_first = TableModel(lambda p: np.where(np.arange(6) == EOS_ID, 0.0, -5.0))
    assert greedy_decode(eos_first, CTX) == []


def test_greedy_never_emits_pad_or_bos_and_respects_max_len():
    # pad and bos are the most likely tokens, yet are never emitted
    fn = lambda p: np.array([5.0, -1.0, 5.0, -9.0, 1.0, 0.0])
    out = greedy_decode(TableModel(fn), CTX, max_len=4)
    assert out == [4, 4, 4, 4]
    with pytest.raises(ValueError):
        greedy_decode(TableModel(fn), CTX, max_len=0)


def random_table(seed, V=6):
    cache = {}

    def fn(prefix):
        if prefix not in cache:
            r = np.random.default_rng([seed, len(prefix)] + list(prefix))
            z = r.normal(size=V) * 2
            z[1] = -np.inf  # keep the toy vocabulary to {eos, 4, 5}
            cache[prefix] = log_normalize(z)
        return cache[prefix]

    return fn


def test_decoding_is_deterministic():
    m = TableModel(random_table(3))
    assert greedy_decode(m, CTX) == greedy_decode(m, CTX)
    assert beam_decode(m, CTX, 3) == beam_decode(m, CTX, 3)


# beam ------------------------------------------------------------------------------------------

def tiny_mtn(seed):
    cfg = ModelConfig(d=8, d_f=12, d_emb=8, P=2, L=1, L_dec=1, L_levels=[1], vocab_size=9, max_query_len=3,
                      dropout=0.0, label_smoothing=0.0)
    return build_model(cfg, np.random.default_rng(seed))


def test_width_one_equals_greedy_on_random_models():
    for seed in range(100):
        r = np.random.default_rng(seed)
        if seed % 2:
            model = TableModel(random_table(seed))
            ctx = CTX
        else:
            model = tiny_mtn(seed)
            for _, p in model.named_parameters():
                p.data = p.data + r.normal(scale=0.5, size=p.shape)
            ids = r.integers(4, 9, size=(2, 3))
            ctx = SessionBatch(ids, np.ones_like(ids, dtype=bool))
        assert beam_decode(model, ctx, width=1, max_len=5) == greedy_decode(model, ctx, max_len=5)


def test_width_one_equals_greedy_under_ties():
    fn = lambda p: np.where(np.isin(np.arange(6), [3, 4, 5]), 0.0, -np.inf)
    assert beam_decode(TableModel(fn), CTX, width=1, max_len=3) == greedy_decode(TableModel(fn), CTX, 3) == []


def exhaustive_best(fn, max_len, content=(4, 5)):
    best = None
    for k in range(max_len + 1):
        for seq in itertools.product(content, repeat=k):
            logp = sum(fn((2,) + seq[:i])[tok] for i, tok in enumerate(seq))
            options = []
            if k < max_len:
                options.append((logp + fn((2,) + seq)[EOS_ID]) / (k + 1))
            else:
                options.append(logp / max(k, 1))
            for score in options:
                if best is None or score > best[0]:
                    best = (score, list(seq))
    return best


@pytest.mark.parametrize("seed", range(20))
def test_wide_beam_finds_global_optimum(seed):
    max_len = 3
    fn = random_table(100 + seed)
    hyps = beam_search(TableModel(fn), CTX, width=3 ** max_len, max_len=max_len)
    score, seq = exhaustive_best(fn, max_len)
    assert abs(hyps[0].score - score) < 1e-12
    assert hyps[0].output == seq
    assert all(a.score >= b.score for a, b in zip(hyps, hyps[1:]))


def test_beam_argument_errors():
    m = TableModel(random_table(0))
    with pytest.raises(ValueError):
        beam_search(m, CTX, width=0)
    with pytest.raises(ValueError):
        beam_search(m, CTX, max_len=0)


# n-gram precision ------------------------------------------------------------------------------

def brute_force_counts(cands, refs, n):
    matches = total = 0
    for c, r in zip(cands, refs):
        pool = [tuple(r[i:i + n]) for i in range(len(r) - n + 1)]
        for i in range(len(c) - n + 1):
            g = tuple(c[i:i + n])
            total += 1
            if g in pool:
                pool.remove(g)
                matches += 1
    return matches, total


def test_precision_matches_multiset_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        size = int(rng.integers(1, 5))
        cands = [list(rng.choice(list("abcde"), size=int(rng.integers(0, 7)))) for _ in range(size)]
        refs = [list(rng.choice(list("abcde"), size=int(rng.integers(0, 7)))) for _ in range(size)]
        for n in range(1, 5):
            m, t = brute_force_counts(cands, refs, n)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NoCandidateNgramsWarning)
                assert ngram_precision(cands, refs, n) == (m / t if t else 0.0)


def test_precision_examples():
    assert ngram_precision([["a", "a", "b"]], [["a", "b"]], 1) == 2 / 3
    s = [["x", "y", "z", "w"]]
    assert all(ngram_precision(s, s, n) == 1.0 for n in range(1, 5))
    assert ngram_precision([["a", "b"]], [["c", "d"]], 1) == 0.0
    with pytest.warns(NoCandidateNgramsWarning):
        assert ngram_precision([["a"]], [["a"]], 2) == 0.0
    with pytest.raises(ValueError):
        ngram_precision([["a"]], [], 1)


# BLEU ----------------------------------------------------------------------------------------------

@given(st.lists(st.lists(st.sampled_from("abcde"), min_size=4, max_size=8), min_size=1, max_size=6))
def test_bleu_self_score(corpus):
    assert bleu(corpus, corpus) == 100.0


def test_brevity_penalty():
    assert brevity_penalty(3, 3) == 1.0
    assert brevity_penalty(4, 3) == 1.0
    assert abs(brevity_penalty(1, 2) - math.exp(-1)) < 1e-15
    assert brevity_penalty(0, 2) == 0.0


def test_bleu_zero_precision_and_smoothing():
    cand, ref = [["a", "b", "c"]], [["a", "b", "c"]]
    assert bleu(cand, ref) == 0.0  # no 4-grams
    assert bleu(cand, ref, smooth=True) == 100.0 * (1 * 1 * 1 * 1) ** 0.25
    with pytest.raises(ValueError):
        bleu([], [])


def test_bleu_hand_value():
    cand, ref = [list("abcdx")], [list("abcde")]
    p = [4 / 5, 3 / 4, 2 / 3, 1 / 2]
    assert abs(bleu(cand, ref) - 100 * math.exp(sum(math.log(x) for x in p) / 4)) < 1e-12


@given(st.lists(st.sampled_from("abcd"), min_size=4, max_size=8), st.data())
def test_bleu_monotone_under_token_replacement(ref, data):
    cand = list(ref)
    matching = list(range(len(cand)))
    prev = bleu([cand], [ref], smooth=True)
    for i in data.draw(st.permutations(matching)):
        cand[i] = "zz"
        now = bleu([cand], [ref], smooth=True)
        assert now <= prev + 1e-12
        prev = now


def test_metrics_and_format():
    values = metrics([list("abcd")], [list("abcd")])
    assert values == {"p1": 100.0, "p2": 100.0, "p3": 100.0, "p4": 100.0, "bleu": 100.0}
    assert format_metrics(values) == "p1=100.00 p2=100.00 p3=100.00 p4=100.00 bleu=100.00"
    assert json.loads(format_metrics(values, as_json=True))["bleu"] == 100.0


def test_exact_match():
    assert exact_match([["a"], ["b"]], [["a"], ["c"]]) == 0.5
