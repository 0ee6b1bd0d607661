"""Greedy and beam decoding, clipped n-gram precision and corpus BLEU."""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import BOS_ID, EOS_ID, PAD_ID, encode_query
from .mtn import SessionBatch
from .transformer import RunMode

BANNED = (PAD_ID, BOS_ID)


class NoCandidateNgramsWarning(UserWarning):
    """Raised through :mod:`warnings` when a precision has an empty denominator."""


def context_batch(queries: Sequence[Sequence[str]], vocab, n_max: int) -> SessionBatch:
    """A single-session batch from token lists; OOV tokens become <unk>."""
    if not queries:
        raise ValueError("the session context is empty")
    rows, valid = zip(*(encode_query(q, vocab, n_max) for q in queries))
    return SessionBatch(np.stack(rows)[None], np.stack(valid)[None])


def _eval_mode(model) -> RunMode:
    cfg = getattr(model, "config", None)
    return RunMode(eps=cfg.ln_eps) if cfg is not None else RunMode()


def _next_log_probs(model, memory, prefix: Sequence[int], mode) -> np.ndarray:
    lp = model.decode_log_probs(memory, np.asarray([prefix], dtype=np.int64), mode)
    out = np.array(lp.data[-1], dtype=np.float64)
    out[list(BANNED)] = -np.inf
    return out


def greedy_decode(model, context: SessionBatch, max_len: int = 12) -> list:
    """Argmax decoding from <bos>; returns ids without the final <eos>."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    mode = _eval_mode(model)
    memory = model.encode(context, mode)
    prefix = [BOS_ID]
    out = []
    for _ in range(max_len):
        tok = int(np.argmax(_next_log_probs(model, memory, prefix, mode)))  # first max = lowest id
        if tok == EOS_ID:
            break
        out.append(tok)
        prefix.append(tok)
    return out


@dataclass
class Hypothesis:
    tokens: list  # generated ids, <eos> included when finished
    logp: float
    finished: bool

    @property
    def score(self) -> float:
        return self.logp / max(len(self.tokens), 1)

    @property
    def output(self) -> list:
        return self.tokens[:-1] if self.finished else list(self.tokens)


def beam_search(model, context: SessionBatch, width: int = 5, max_len: int = 12) -> list:
    """Length-normalized beam search; returns hypotheses best first.

    Candidates at one step are ranked by cumulative log-probability, then by
    the last token's log-probability, then by parent rank and token id, so a
    width of one follows the greedy path exactly.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    mode = _eval_mode(model)
    memory = model.encode(context, mode)
    alive = [Hypothesis([], 0.0, False)]
    finished = []
    for _ in range(max_len):
        cands = []
        for rank, hyp in enumerate(alive):
            lp = _next_log_probs(model, memory, [BOS_ID] + hyp.tokens, mode)
            for tok in np.flatnonzero(np.isfinite(lp)):
                cum = hyp.logp + lp[tok]
                cands.append((-cum, -lp[tok], rank, int(tok), hyp))
        cands.sort(key=lambda c: c[:4])
        alive = []
        for neg_cum, _, _, tok, parent in cands[:width]:
            hyp = Hypothesis(parent.tokens + [tok], -neg_cum, tok == EOS_ID)
            (finished if hyp.finished else alive).append(hyp)
        if not alive:
            break
    pool = finished + alive
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].score, i))
    return [pool[i] for i in order]


def beam_decode(model, context: SessionBatch, width: int = 5, max_len: int = 12) -> list:
    return beam_search(model, context, width, max_len)[0].output


# ---------------------------------------------------------------------------
# metrics


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def ngram_counts(candidates: Sequence, references: Sequence, n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-grams) summed over the corpus."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    if n < 1:
        raise ValueError("n-gram order must be >= 1")
    matches = total = 0
    for cand, ref in zip(candidates, references):
        c = ngrams(cand, n)
        r = ngrams(ref, n)
        matches += sum(min(k, r[g]) for g, k in c.items())
        total += sum(c.values())
    return matches, total


def ngram_precision(candidates: Sequence, references: Sequence, n: int) -> float:
    matches, total = ngram_counts(candidates, references, n)
    if total == 0:
        warnings.warn(f"no candidate {n}-grams; precision defined as 0", NoCandidateNgramsWarning,
                      stacklevel=2)
        return 0.0
    return matches / total


def brevity_penalty(c: int, r: int) -> float:
    if c > r:
        return 1.0
    if c == 0:
        return 0.0
    return math.exp(1.0 - r / c)


def bleu(candidates: Sequence, references: Sequence, max_order: int = 4, smooth: bool = False) -> float:
    """Corpus BLEU in [0, 100] with uniform weights over orders 1..max_order.

    With ``smooth`` set, orders above one use (matches + 1) / (total + 1).
    """
    if not candidates:
        raise ValueError("BLEU of an empty corpus is undefined")
    log_sum = 0.0
    for n in range(1, max_order + 1):
        m, t = ngram_counts(candidates, references, n)
        if smooth and n > 1:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t) / max_order
    c = sum(len(x) for x in candidates)
    r = sum(len(x) for x in references)
    return 100.0 * brevity_penalty(c, r) * math.exp(log_sum)


def metrics(candidates: Sequence, references: Sequence, smooth: bool = False) -> dict:
    """Precisions p1..p4 and BLEU, all as percentages."""
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoCandidateNgramsWarning)
        for n in range(1, 5):
            out[f"p{n}"] = 100.0 * ngram_precision(candidates, references, n)
    out["bleu"] = bleu(candidates, references, smooth=smooth)
    return out


def format_metrics(values: dict, as_json: bool = False) -> str:
    if as_json:
        return json.dumps({k: round(v, 4) for k, v in values.items()}, sort_keys=True)
    return " ".join(f"{k}={values[k]:.2f}" for k in ("p1", "p2", "p3", "p4", "bleu"))


def decode_corpus(model, examples, vocab, n_max: int, width: int = 1, max_len: int = 12) -> list:
    """Decode every pair's source session; returns token lists."""
    out = []
    for ex in examples:
        ctx = context_batch(ex.source, vocab, n_max)
        ids = greedy_decode(model, ctx, max_len) if width == 1 else beam_decode(model, ctx, width, max_len)
        out.append(vocab.decode(ids))
    return out


def exact_match(candidates: Sequence, references: Sequence) -> float:
    if not candidates:
        raise ValueError("no candidates")
    return sum(list(c) == list(r) for c, r in zip(candidates, references)) / len(candidates)
