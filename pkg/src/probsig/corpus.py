"""Token streams, bigram statistics and synthetic Markov corpora."""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


@dataclass
class TokenStream:
    sequences: list[np.ndarray]
    d_vob: int = 0
    dropped: int = 0  # trailing tokens discarded by chunking

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        top = max((int(s.max()) for s in self.sequences if s.size), default=-1)
        if any(s.size and s.min() < 0 for s in self.sequences):
            raise CorpusError("token ids must be non-negative")
        if self.d_vob and top >= self.d_vob:
            raise CorpusError(f"token id {top} exceeds d_vob={self.d_vob}")
        self.d_vob = self.d_vob or top + 1

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_tokens(self) -> int:
        return sum(s.size for s in self.sequences)

    def tolist(self) -> list[list[int]]:
        return [s.tolist() for s in self.sequences]


def chunk(tokens: np.ndarray, seq_len: int) -> TokenStream:
    if seq_len < 1:
        raise CorpusError("sequence length must be >= 1")
    n = tokens.size // seq_len
    seqs = list(tokens[: n * seq_len].reshape(n, seq_len)) if n else []
    stream = TokenStream(seqs, dropped=int(tokens.size - n * seq_len))
    if stream.dropped:
        log.info("dropped %d trailing tokens", stream.dropped)
    return stream


_TOKEN = re.compile(rb"\S+")


def ingest(path, fmt: str = "text-int", seq_len: int = 2048) -> TokenStream:
    """Read a pre-tokenized corpus and cut it into length-``seq_len`` sequences."""
    raw = Path(path).read_bytes()
    if fmt == "text-int":
        vals = []
        for m in _TOKEN.finditer(raw):
            tok = m.group()
            if not tok.isdigit() or int(tok) >= 2 ** 32:
                raise CorpusError(f"{path}: malformed token {tok[:20]!r} at byte offset {m.start()}")
            vals.append(int(tok))
        tokens = np.array(vals, dtype=np.int64)
    elif fmt == "binary-u32":
        if len(raw) % 4:
            raise CorpusError(f"{path}: length {len(raw)} is not a multiple of 4 (truncated at byte offset {len(raw) - len(raw) % 4})")
        tokens = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    else:
        raise CorpusError(f"unknown corpus format {fmt!r}")
    return chunk(tokens, seq_len)


def write_binary(path, tokens: Iterable[int]) -> None:
    Path(path).write_bytes(np.asarray(list(tokens), dtype="<u4").tobytes())


@dataclass
class BigramCounts:
    pairs: Counter = field(default_factory=Counter)
    d_vob: int = 0

    @property
    def total(self) -> int:
        return sum(self.pairs.values())

    def merge(self, other: "BigramCounts") -> "BigramCounts":
        return BigramCounts(self.pairs + other.pairs, max(self.d_vob, other.d_vob))

    def dense(self) -> np.ndarray:
        """(d_vob, d_vob) matrix, row = current token, column = next token."""
        m = np.zeros((self.d_vob, self.d_vob))
        for (s, t), c in self.pairs.items():
            m[s, t] = c
        return m

    def next_counts(self, s: int) -> np.ndarray:
        row = np.zeros(self.d_vob)
        if not 0 <= s < self.d_vob:
            return row
        for (a, b), c in self.pairs.items():
            if a == s:
                row[b] += c
        return row

    def prev_counts(self, s: int) -> np.ndarray:
        col = np.zeros(self.d_vob)
        if not 0 <= s < self.d_vob:
            return col
        for (a, b), c in self.pairs.items():
            if b == s:
                col[a] += c
        return col

    def to_csv(self) -> str:
        lines = ["s,s_next,count"] + [f"{s},{t},{c}" for (s, t), c in sorted(self.pairs.items())]
        return "\n".join(lines) + "\n"


def count_bigrams(stream: TokenStream) -> BigramCounts:
    """Adjacent-pair counts within each sequence; no pair spans two sequences."""
    if len(stream) == 0:
        raise CorpusError("empty stream")
    v = stream.d_vob
    codes = [s[:-1] * v + s[1:] for s in stream.sequences if s.size >= 2]
    counts = Counter()
    if codes:
        uniq, cnt = np.unique(np.concatenate(codes), return_counts=True)
        counts.update({(int(u // v), int(u % v)): int(c) for u, c in zip(uniq, cnt)})
    return BigramCounts(counts, v)


@dataclass
class MarkovSpec:
    transition: np.ndarray
    initial: np.ndarray | None = None
    seq_len: int = 64
    n_sequences: int = 100
    seed: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        k = self.transition.shape[0]
        if self.transition.shape != (k, k) or (self.transition < 0).any():
            raise CorpusError("transition must be a square nonnegative matrix")
        if np.abs(self.transition.sum(axis=1) - 1.0).max() > 1e-12:
            raise CorpusError("transition rows must sum to 1")
        if self.initial is None:
            self.initial = stationary(self.transition)
        self.initial = np.asarray(self.initial, dtype=np.float64)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]


def stationary(transition: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(transition.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    pi = np.abs(pi)
    return pi / pi.sum()


def generate_markov(spec: MarkovSpec) -> TokenStream:
    """Sample ``n_sequences`` chains of length ``seq_len`` (vectorised over chains)."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    k = spec.n_states
    cdf = np.cumsum(spec.transition, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty((spec.n_sequences, spec.seq_len), dtype=np.int64)
    init_cdf = np.cumsum(spec.initial / spec.initial.sum())
    init_cdf[-1] = 1.0
    out[:, 0] = np.searchsorted(init_cdf, rng.random(spec.n_sequences), side="right")
    for t in range(1, spec.seq_len):
        u = rng.random(spec.n_sequences)
        prev = out[:, t - 1]
        out[:, t] = (u[:, None] >= cdf[prev]).sum(axis=1)
    np.minimum(out, k - 1, out=out)
    return TokenStream(list(out), d_vob=k)


def random_transition(n_states: int, concentration: float = 0.3, seed: int = 0) -> np.ndarray:
    """Dirichlet-distributed rows; small ``concentration`` gives peaked rows."""
    rng = np.random.Generator(np.random.PCG64(seed))
    m = rng.dirichlet(np.full(n_states, concentration), size=n_states)
    m = np.maximum(m, 1e-6)
    return m / m.sum(axis=1, keepdims=True)


def clustered_transition(n_states: int, n_clusters: int = 3, concentration: float = 0.5, mix: float = 0.3,
                         seed: int = 0) -> np.ndarray:
    """Rows share a per-cluster next-token profile plus a private Dirichlet part.

    States are assigned to clusters round-robin. ``mix`` is the weight of the
    private part; ``mix=1`` reduces to independent Dirichlet rows.
    """
    if not 1 <= n_clusters <= n_states:
        raise CorpusError("need 1 <= n_clusters <= n_states")
    if not 0.0 <= mix <= 1.0:
        raise CorpusError("mix must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    base = rng.dirichlet(np.full(n_states, concentration), size=n_clusters)
    own = rng.dirichlet(np.full(n_states, concentration), size=n_states)
    m = (1.0 - mix) * base[np.arange(n_states) % n_clusters] + mix * own
    m = np.maximum(m, 1e-6)
    return m / m.sum(axis=1, keepdims=True)


def banded_transition(n_states: int, width: float = 1.0, noise: float = 0.2, seed: int = 0) -> np.ndarray:
    """Ring-local chain: state s mostly moves to states near s + 1 (circularly).

    Each row is a circular Gaussian bump of ``width`` centred on s + 1, mixed
    with a Dirichlet(1) row of weight ``noise``.
    """
    if width <= 0:
        raise CorpusError("width must be positive")
    if not 0.0 <= noise <= 1.0:
        raise CorpusError("noise must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = np.arange(n_states)
    off = (idx[None, :] - idx[:, None] - 1) % n_states
    circ = np.minimum(off, n_states - off)
    bump = np.exp(-0.5 * (circ / width) ** 2)
    bump /= bump.sum(axis=1, keepdims=True)
    m = (1.0 - noise) * bump + noise * rng.dirichlet(np.ones(n_states), size=n_states)
    return m / m.sum(axis=1, keepdims=True)


def top_frequent(stream: TokenStream, c: int) -> tuple[list[int], bool]:
    """Top-``c`` tokens by count (ties -> smaller id) and a flag set when fewer exist."""
    if c < 1:
        raise CorpusError("C must be >= 1")
    counts = np.bincount(np.concatenate(stream.sequences), minlength=stream.d_vob)
    present = np.flatnonzero(counts)
    order = present[np.lexsort((present, -counts[present]))]
    short = c > order.size
    if short:
        log.warning("requested %d tokens but only %d distinct tokens occur", c, order.size)
    return [int(t) for t in order[:c]], short
