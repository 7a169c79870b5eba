"""Count-based n-gram sleep model with add-k smoothing and interpolated fallback.

Contexts are tuples of token indices where 0..4 are the sleep stages and
5 is the record-start boundary symbol ``<s>``. A record is padded on the
left with ``order - 1`` boundary symbols, so every epoch is counted once
at every order ``1..n``.
"""

from __future__ import annotations

import re
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .core import N_STAGES, STAGE_TOKENS, Hypnogram, SequenceModel
from .io import FormatError

BOUNDARY = 5
BOUNDARY_TOKEN = "<s>"
EMPTY_CONTEXT_TOKEN = "∅"
MAX_ORDER = 9
# 6**6 contexts; above this the model is queried sparsely instead of via tables
DENSE_MAX_ORDER = 7

DEFAULT_K = 0.01
DEFAULT_LAMBDA = 0.999

_TOKENS = STAGE_TOKENS + (BOUNDARY_TOKEN,)
_TOKEN_INDEX = {t: i for i, t in enumerate(_TOKENS)}
_HEADER_RE = re.compile(
    r"^SLM-NGRAM v1 order=(?P<order>\S+) k=(?P<k>\S+) lambda=(?P<lam>\S+)$")


def encode_context(ctx: Sequence[int]) -> int:
    cid = 0
    for tok in ctx:
        cid = cid * 6 + int(tok)
    return cid


def decode_context(cid: int, length: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        cid, tok = divmod(cid, 6)
        out.append(tok)
    return tuple(reversed(out))


class NgramModel(SequenceModel):
    """Order-``n`` model; ``counts`` maps context tuples to per-stage counts."""

    def __init__(self, order: int, counts: dict[tuple[int, ...], np.ndarray],
                 smoothing_k: float = DEFAULT_K,
                 interpolation_lambda: float = DEFAULT_LAMBDA):
        _check_hyperparameters(order, smoothing_k, interpolation_lambda)
        for ctx, c in counts.items():
            if len(ctx) >= order:
                raise ValueError(f"context {ctx} too long for order {order}")
            if any(not 0 <= t <= BOUNDARY for t in ctx):
                raise ValueError(f"bad token in context {ctx}")
            if np.any(np.asarray(c) < 0):
                raise ValueError(f"negative count for context {ctx}")
        self.order = int(order)
        self.smoothing_k = float(smoothing_k)
        self.interpolation_lambda = float(interpolation_lambda)
        self.counts = {tuple(int(t) for t in ctx): np.asarray(c, dtype=np.int64)
                       for ctx, c in counts.items()}
        self._memo: dict[tuple[int, ...], np.ndarray] = {}
        self._tables: list[np.ndarray] | None = None

    def __repr__(self):
        return (f"NgramModel(order={self.order}, contexts={len(self.counts)}, "
                f"k={self.smoothing_k}, lambda={self.interpolation_lambda})")

    def _smoothed(self, c: np.ndarray) -> np.ndarray:
        k = self.smoothing_k
        return (c + k) / (c.sum(axis=-1, keepdims=True) + N_STAGES * k)

    def context_prob(self, ctx: Sequence[int]) -> np.ndarray:
        """Interpolated next-stage distribution for a raw context tuple."""
        ctx = tuple(int(t) for t in ctx)
        if len(ctx) >= self.order:
            ctx = ctx[len(ctx) - self.order + 1:]
        hit = self._memo.get(ctx)
        if hit is not None:
            return hit
        own = self._smoothed(self.counts.get(ctx, np.zeros(N_STAGES, dtype=np.int64)))
        if ctx:
            lam = self.interpolation_lambda
            p = lam * own + (1.0 - lam) * self.context_prob(ctx[1:])
        else:
            p = own
        self._memo[ctx] = p
        return p

    def prob(self, history: Sequence[int]) -> np.ndarray:
        """Next-stage distribution after ``history`` (a record prefix)."""
        return self.context_prob(self._pad(history))

    def _pad(self, history: Sequence[int]) -> tuple[int, ...]:
        m = self.order - 1
        if m == 0:
            return ()
        tail = tuple(int(s) for s in history)[-m:]
        return (BOUNDARY,) * (m - len(tail)) + tail

    # SequenceModel

    def initial_state(self):
        return (BOUNDARY,) * (self.order - 1)

    def advance(self, state, stage):
        if self.order == 1:
            return ()
        return state[1:] + (int(stage),)

    def next_distribution(self, state):
        return self.context_prob(state)

    def stage_probs(self, stages):
        idx = np.asarray(stages, dtype=np.int8)
        m = self.order - 1
        padded = np.concatenate([np.full(m, BOUNDARY, dtype=np.int8), idx])
        ids = kernels.encode_contexts(padded, m, m)
        tables = self._dense()
        if tables is not None:
            return tables[m][ids, idx]
        uniq, inv = np.unique(ids, return_inverse=True)
        rows = np.stack([self.context_prob(decode_context(int(u), m)) for u in uniq])
        return rows[inv, idx]

    def _dense(self) -> list[np.ndarray] | None:
        if self.order > DENSE_MAX_ORDER:
            return None
        if self._tables is None:
            lam = self.interpolation_lambda
            tables = []
            for m in range(self.order):
                c = np.zeros((6 ** m, N_STAGES), dtype=np.int64)
                for ctx, row in self.counts.items():
                    if len(ctx) == m:
                        c[encode_context(ctx)] = row
                own = self._smoothed(c)
                if m == 0:
                    tables.append(own)
                else:
                    lower = tables[m - 1][np.arange(6 ** m) % 6 ** (m - 1)]
                    tables.append(lam * own + (1.0 - lam) * lower)
            self._tables = tables
        return self._tables

    def dense_tables(self):
        tables = self._dense()
        if tables is None:
            return None
        m = self.order - 1
        n_states = 6 ** m
        next_state = (np.arange(n_states, dtype=np.int64)[:, None] * 6
                      + np.arange(N_STAGES)[None, :]) % n_states
        start = encode_context((BOUNDARY,) * m)
        return np.log(tables[m]), next_state, start

    # persistence

    def to_text(self) -> str:
        lines = [f"SLM-NGRAM v1 order={self.order} k={self.smoothing_k!r} "
                 f"lambda={self.interpolation_lambda!r}"]
        for ctx in sorted(self.counts):
            row = self.counts[ctx]
            if not row.any():
                continue
            left = " ".join(_TOKENS[t] for t in ctx) if ctx else EMPTY_CONTEXT_TOKEN
            lines.append(f"{left} | " + " ".join(str(int(c)) for c in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NgramModel":
        lines = text.splitlines()
        if not lines or not lines[0].strip():
            raise FormatError("missing SLM-NGRAM header", 1)
        m = _HEADER_RE.match(lines[0].strip())
        if m is None:
            raise FormatError("malformed SLM-NGRAM header", 1)
        try:
            order = int(m["order"])
            k = float(m["k"])
            lam = float(m["lam"])
            _check_hyperparameters(order, k, lam)
        except ValueError as exc:
            raise FormatError(f"bad header value: {exc}", 1) from None
        counts: dict[tuple[int, ...], np.ndarray] = {}
        for lineno, raw in enumerate(lines[1:], start=2):
            line = raw.strip()
            if not line:
                continue
            if "|" not in line:
                raise FormatError("expected '<context> | <counts>'", lineno)
            left, right = (part.strip() for part in line.split("|", 1))
            if left == EMPTY_CONTEXT_TOKEN:
                ctx = ()
            else:
                try:
                    ctx = tuple(_TOKEN_INDEX[t] for t in left.split())
                except KeyError as exc:
                    raise FormatError(f"unknown token {exc.args[0]!r}", lineno) from None
            if len(ctx) >= order:
                raise FormatError(f"context longer than order - 1 = {order - 1}", lineno)
            fields = right.split()
            if len(fields) != N_STAGES:
                raise FormatError(f"expected {N_STAGES} counts", lineno)
            if not all(f.isdigit() for f in fields):
                raise FormatError("counts must be non-negative integers", lineno)
            if ctx in counts:
                raise FormatError("duplicate context", lineno)
            counts[ctx] = np.array([int(f) for f in fields], dtype=np.int64)
        if () not in counts:
            raise FormatError("model has no unigram counts", len(lines))
        return cls(order, counts, k, lam)


def _check_hyperparameters(order, smoothing_k, interpolation_lambda):
    if not 1 <= order <= MAX_ORDER:
        raise ValueError(f"order must be in 1..{MAX_ORDER}, got {order}")
    if not smoothing_k > 0:
        raise ValueError("smoothing_k must be positive")
    if not 0 < interpolation_lambda < 1:
        raise ValueError("interpolation_lambda must be in (0, 1)")


def train_ngram(records: Iterable[Hypnogram], order: int, smoothing_k: float = DEFAULT_K,
                interpolation_lambda: float = DEFAULT_LAMBDA) -> NgramModel:
    _check_hyperparameters(order, smoothing_k, interpolation_lambda)
    records = list(records)
    if not records:
        raise ValueError("cannot train on an empty corpus")
    m_top = order - 1
    keys: list[list[np.ndarray]] = [[] for _ in range(order)]
    for rec in records:
        idx = rec.indices()
        padded = np.concatenate([np.full(m_top, BOUNDARY, dtype=np.int8), idx])
        nxt = idx.astype(np.int64)
        for m in range(order):
            keys[m].append(kernels.encode_contexts(padded, m, m_top) * N_STAGES + nxt)
    counts: dict[tuple[int, ...], np.ndarray] = {}
    for m in range(order):
        uniq, n = np.unique(np.concatenate(keys[m]), return_counts=True)
        for key, c in zip(uniq.tolist(), n.tolist()):
            cid, s = divmod(key, N_STAGES)
            ctx = decode_context(cid, m)
            row = counts.get(ctx)
            if row is None:
                row = counts[ctx] = np.zeros(N_STAGES, dtype=np.int64)
            row[s] = c
    return NgramModel(order, counts, smoothing_k, interpolation_lambda)


def ngram_prob(model: NgramModel, history: Sequence[int]) -> np.ndarray:
    return model.prob(history)


def serialize_ngram(model: NgramModel) -> str:
    return model.to_text()


def deserialize_ngram(text: str) -> NgramModel:
    return NgramModel.from_text(text)
