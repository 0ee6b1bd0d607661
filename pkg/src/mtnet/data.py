"""Query-log ingestion: parsing, sessionization, filtering, vocabulary,
pair unrolling and batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .mtn import SessionBatch

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3


class LogFormatError(ValueError):
    pass


class OrderingError(ValueError):
    pass


class BatchError(ValueError):
    pass


@dataclass
class LogRecord:
    anon_id: str
    query: str
    timestamp: datetime


@dataclass
class ParseStats:
    records: int = 0
    malformed: int = 0


def _parse_time(text: str) -> datetime:
    text = text.strip()
    try:
        ts = datetime.fromisoformat(text)
    except ValueError:
        ts = datetime.strptime(text, "%Y-%m-%d %H:%M:%S")
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


def parse_log(lines: Iterable[str], stats: Optional[ParseStats] = None) -> Iterator[LogRecord]:
    """Yield records from ``anon_id<TAB>query<TAB>timestamp`` lines.

    A header line (first field ``AnonID``) is skipped silently; malformed
    lines are skipped and counted in ``stats``. More than half malformed
    raises :class:`LogFormatError` once the input is exhausted.
    """
    stats = stats if stats is not None else ParseStats()
    for lineno, raw in enumerate(lines):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split("\t")]
        if lineno == 0 and parts[0].lower() == "anonid":
            continue
        if len(parts) < 3 or not parts[0] or not parts[1]:
            stats.malformed += 1
            continue
        try:
            ts = _parse_time(parts[2])
        except ValueError:
            stats.malformed += 1
            continue
        stats.records += 1
        yield LogRecord(parts[0], parts[1], ts)
    total = stats.records + stats.malformed
    if stats.malformed:
        log.info("skipped %d malformed log lines", stats.malformed)
    if total and stats.malformed * 2 > total:
        raise LogFormatError(f"{stats.malformed} of {total} lines are malformed")


def read_log(path) -> tuple[list, ParseStats]:
    stats = ParseStats()
    with open(path, encoding="utf-8") as fh:
        records = list(parse_log(fh, stats))
    return records, stats


def sessionize(records: Sequence[LogRecord], gap: timedelta = timedelta(minutes=30)) -> list:
    """Split each user's time-ordered queries wherever the gap is >= ``gap``.

    Records must be grouped by user (in any user order) and time-ordered
    within a user. Returns lists of query strings, ordered by user key and
    then time.
    """
    by_user: dict[str, list] = {}
    last_user = None
    for rec in records:
        seq = by_user.setdefault(rec.anon_id, [])
        if seq and rec.anon_id != last_user:
            raise OrderingError(f"records for user {rec.anon_id!r} are not contiguous")
        if seq and rec.timestamp < seq[-1].timestamp:
            raise OrderingError(f"user {rec.anon_id!r}: timestamps go backwards at {rec.timestamp}")
        seq.append(rec)
        last_user = rec.anon_id
    sessions = []
    for user in sorted(by_user, key=_user_key):
        current = []
        prev = None
        for rec in by_user[user]:
            if prev is not None and rec.timestamp - prev >= gap:
                sessions.append(current)
                current = []
            current.append(rec.query)
            prev = rec.timestamp
        if current:
            sessions.append(current)
    return sessions


def _user_key(user: str):
    return (0, int(user), user) if user.isdigit() else (1, 0, user)


def tokenize(query: str) -> list:
    return query.lower().split()


@dataclass
class Session:
    queries: list  # list of token lists
    user: str = ""

    def __len__(self) -> int:
        return len(self.queries)


def filter_and_normalize(raw_sessions, min_len: int = 3, max_len: int = 5, max_query_len: int = 10) -> list:
    """Tokenize, drop over-long queries, remove consecutive duplicates, then
    keep sessions with ``min_len``..``max_len`` queries."""
    kept = []
    for raw in raw_sessions:
        user = ""
        if isinstance(raw, Session):
            user, raw = raw.user, [" ".join(q) for q in raw.queries]
        queries = []
        for q in raw:
            toks = tokenize(q)
            if not toks or len(toks) > max_query_len:
                continue
            if queries and queries[-1] == toks:
                continue
            queries.append(toks)
        if min_len <= len(queries) <= max_len:
            kept.append(Session(queries, user))
    return kept


@dataclass
class Vocabulary:
    tokens: list  # kept tokens, id = index + len(RESERVED)
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {t: i + len(RESERVED) for i, t in enumerate(self.tokens)}
        for i, t in enumerate(RESERVED):
            self._index[t] = i

    def __len__(self) -> int:
        return len(self.tokens) + len(RESERVED)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list:
        out = []
        for i in ids:
            i = int(i)
            out.append(RESERVED[i] if i < len(RESERVED) else self.tokens[i - len(RESERVED)])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens:
                fh.write(f"{t}\t{self.counts.get(t, 0)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, counts = [], {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, _, cnt = line.partition("\t")
                tokens.append(tok)
                counts[tok] = int(cnt) if cnt else 0
        return cls(tokens, counts)


def build_vocab(sessions: Sequence[Session], min_count: int = 8) -> Vocabulary:
    """Tokens with at least ``min_count`` occurrences, by descending count
    then lexicographically."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tok for s in sessions for q in s.queries for tok in q)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(kept, {t: counts[t] for t in kept})


@dataclass
class PairExample:
    source: list  # queries 1..j, token lists
    target: list  # query j+1

    @property
    def prefix_len(self) -> int:
        return len(self.source)


def unroll_pairs(session: Session) -> list:
    qs = session.queries if isinstance(session, Session) else session
    if len(qs) < 2:
        raise ValueError("a session needs at least two queries to form a pair")
    return [PairExample(list(qs[:j]), qs[j]) for j in range(1, len(qs))]


def split_sessions(sessions: Sequence, ratios=(0.95, 0.025, 0.025), seed: int = 0) -> tuple:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    order = np.random.default_rng(seed).permutation(len(sessions))
    n_train = int(round(ratios[0] * len(sessions)))
    n_valid = int(round(ratios[1] * len(sessions)))
    pick = lambda idx: [sessions[i] for i in sorted(idx)]
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_valid]), pick(order[n_train + n_valid:]))


def encode_query(tokens, vocab: Vocabulary, n_max: int) -> tuple:
    ids = vocab.encode(tokens)
    if len(ids) > n_max:
        raise BatchError(f"query of {len(ids)} tokens exceeds n_max={n_max}")
    row = np.full(n_max, PAD_ID, dtype=np.int64)
    row[:len(ids)] = ids
    valid = np.arange(n_max) < len(ids)
    return row, valid


def make_batch(examples: Sequence[PairExample], vocab: Vocabulary, n_max: int) -> SessionBatch:
    S = examples[0].prefix_len
    if any(e.prefix_len != S for e in examples):
        raise BatchError("all examples in a batch need the same prefix length")
    B = len(examples)
    q = np.full((B, S, n_max), PAD_ID, dtype=np.int64)
    valid = np.zeros((B, S, n_max), dtype=bool)
    for b, ex in enumerate(examples):
        for s, query in enumerate(ex.source):
            q[b, s], valid[b, s] = encode_query(query, vocab, n_max)
    targets = [vocab.encode(e.target) for e in examples]
    if max(len(t) for t in targets) > n_max:
        raise BatchError(f"target longer than n_max={n_max}")
    m = max(len(t) for t in targets) + 1
    t_in = np.full((B, m), PAD_ID, dtype=np.int64)
    t_out = np.full((B, m), PAD_ID, dtype=np.int64)
    for b, t in enumerate(targets):
        t_in[b, :len(t) + 1] = [BOS_ID] + t
        t_out[b, :len(t) + 1] = t + [EOS_ID]
    return SessionBatch(q, valid, t_in, t_out)


def make_batches(examples: Sequence[PairExample], vocab: Vocabulary, n_max: int, batch_capacity: int,
                 seed: Optional[int] = 0) -> list:
    """Group examples by source length, chunk by capacity, shuffle deterministically.

    With ``seed=None`` the batch order is the grouped order (length, then input order).
    """
    if batch_capacity < 1:
        raise ValueError("batch_capacity must be >= 1")
    groups: dict[int, list] = {}
    for ex in examples:
        groups.setdefault(ex.prefix_len, []).append(ex)
    rng = np.random.default_rng(seed) if seed is not None else None
    batches = []
    for length in sorted(groups):
        items = groups[length]
        if rng is not None:
            items = [items[i] for i in rng.permutation(len(items))]
        for i in range(0, len(items), batch_capacity):
            batches.append(make_batch(items[i:i + batch_capacity], vocab, n_max))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


# prepared-dataset files: one session per line, queries joined by TAB,
# tokens separated by single spaces


def write_sessions(sessions: Sequence[Session], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write("\t".join(" ".join(q) for q in s.queries) + "\n")


def read_sessions(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                out.append(Session([q.split(" ") for q in line.split("\t")]))
    return out


def prepare_dataset(log_path, out_dir, gap_minutes: float = 30, min_len: int = 3, max_len: int = 5,
                    max_query_len: int = 10, min_count: int = 8, split=(0.95, 0.025, 0.025),
                    seed: int = 0) -> dict:
    """Log file -> train/valid/test session files plus vocab.tsv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, stats = read_log(log_path)
    raw = sessionize(records, timedelta(minutes=gap_minutes))
    sessions = filter_and_normalize(raw, min_len, max_len, max_query_len)
    train, valid, test = split_sessions(sessions, split, seed)
    vocab = build_vocab(train, min_count)
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        write_sessions(part, out_dir / f"{name}.txt")
    vocab.save(out_dir / "vocab.tsv")
    return {"records": stats.records, "malformed": stats.malformed, "raw_sessions": len(raw),
            "sessions": len(sessions), "train": len(train), "valid": len(valid), "test": len(test),
            "vocab": len(vocab)}
