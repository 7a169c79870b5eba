"""Domain types, the sequence-model contract and evaluation metrics."""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Iterable, Sequence

import numpy as np

N_STAGES = 5
EPOCH_SECONDS = 30
DIST_ATOL = 1e-9


class SleepStage(IntEnum):
    """AASM sleep stage; the integer value is the canonical column index."""

    W = 0
    REM = 1
    N1 = 2
    N2 = 3
    N3 = 4

    @property
    def token(self) -> str:
        return self.name

    @classmethod
    def from_token(cls, token: str) -> "SleepStage":
        try:
            return cls[token]
        except KeyError:
            raise ValueError(f"unknown sleep stage token {token!r}") from None


STAGES: tuple[SleepStage, ...] = tuple(SleepStage)
STAGE_TOKENS: tuple[str, ...] = tuple(s.name for s in STAGES)


class ZeroProbabilityError(ArithmeticError):
    """A model assigned zero probability to an observed stage."""

    def __init__(self, record_id: str, epoch: int, stage: SleepStage):
        self.record_id = record_id
        self.epoch = epoch
        self.stage = stage
        super().__init__(
            f"zero probability for stage {stage.name} at epoch {epoch} "
            f"of record {record_id!r}"
        )


@dataclass(frozen=True)
class Hypnogram:
    record_id: str
    stages: tuple[SleepStage, ...]
    epoch_seconds: int = EPOCH_SECONDS

    def __post_init__(self):
        if not self.stages:
            raise ValueError(f"hypnogram {self.record_id!r} has no epochs")
        if self.epoch_seconds <= 0:
            raise ValueError("epoch_seconds must be positive")
        if not isinstance(self.stages, tuple):
            object.__setattr__(self, "stages", tuple(self.stages))

    @classmethod
    def from_indices(cls, record_id: str, indices: Iterable[int],
                     epoch_seconds: int = EPOCH_SECONDS) -> "Hypnogram":
        idx = np.asarray(indices).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= N_STAGES):
            raise ValueError("stage index out of range")
        return cls(record_id, tuple(STAGES[i] for i in idx.tolist()), epoch_seconds)

    @classmethod
    def from_tokens(cls, record_id: str, tokens: Iterable[str]) -> "Hypnogram":
        return cls(record_id, tuple(SleepStage.from_token(t) for t in tokens))

    def indices(self) -> np.ndarray:
        return np.fromiter(self.stages, dtype=np.int8, count=len(self.stages))

    def __len__(self) -> int:
        return len(self.stages)


def check_distribution(probs: Any, atol: float = DIST_ATOL) -> np.ndarray:
    """Return ``probs`` as a float64 5-vector, raising if it is not a distribution."""
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (N_STAGES,):
        raise ValueError(f"expected a {N_STAGES}-vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("distribution entries must be finite and non-negative")
    if abs(p.sum() - 1.0) > atol:
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
    return p


def check_likelihoods(matrix: Any, atol: float = 1e-6) -> np.ndarray:
    """Validate a T x 5 likelihood matrix (each row a stage distribution)."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != N_STAGES:
        raise ValueError(f"likelihood matrix must be T x {N_STAGES}, got {m.shape}")
    if m.shape[0] == 0:
        raise ValueError("likelihood matrix is empty")
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise ValueError("likelihoods must be finite and non-negative")
    dev = np.abs(m.sum(axis=1) - 1.0)
    if np.any(dev > atol):
        row = int(np.argmax(dev))
        raise ValueError(f"likelihood row {row} sums to {m[row].sum()!r}")
    return m


class SequenceModel(ABC):
    """Predicts the next-stage distribution from the stages seen so far.

    Implementations expose an incremental state: ``initial_state`` is the
    state at record start, ``advance`` consumes one stage and
    ``next_distribution`` reads the prediction off a state. States are
    treated as immutable values, so a beam can share a parent's state.
    """

    #: whether one state object may be read from several threads at once
    state_shareable: bool = True

    @abstractmethod
    def initial_state(self) -> Any: ...

    @abstractmethod
    def advance(self, state: Any, stage: int) -> Any: ...

    @abstractmethod
    def next_distribution(self, state: Any) -> np.ndarray: ...

    def predict(self, history: Sequence[int] = ()) -> np.ndarray:
        state = self.initial_state()
        for s in history:
            state = self.advance(state, int(s))
        return self.next_distribution(state)

    def predict_batch(self, states: Sequence[Any]) -> np.ndarray:
        return np.stack([self.next_distribution(s) for s in states])

    def advance_batch(self, states: Sequence[Any], stages: Sequence[int]) -> list:
        return [self.advance(st, int(s)) for st, s in zip(states, stages)]

    def stage_probs(self, stages: Sequence[int]) -> np.ndarray:
        """Probability the model gave each observed stage, scored left to right."""
        out = np.empty(len(stages))
        state = self.initial_state()
        for e, s in enumerate(stages):
            out[e] = self.next_distribution(state)[int(s)]
            state = self.advance(state, int(s))
        return out

    def stage_probs_many(self, sequences: Sequence[Sequence[int]]) -> list[np.ndarray]:
        return [self.stage_probs(s) for s in sequences]

    def dense_tables(self):
        """Finite-state form ``(log_probs, next_state, start)`` or None.

        Models whose state space is small and finite return integer-state
        tables so the decoder can run its compiled kernel.
        """
        return None


class UniformModel(SequenceModel):
    """Predicts 1/5 for every stage regardless of history."""

    def initial_state(self):
        return None

    def advance(self, state, stage):
        return None

    def next_distribution(self, state):
        return np.full(N_STAGES, 1.0 / N_STAGES)

    def stage_probs(self, stages):
        return np.full(len(stages), 1.0 / N_STAGES)

    def dense_tables(self):
        return (np.full((1, N_STAGES), -math.log(N_STAGES)),
                np.zeros((1, N_STAGES), dtype=np.int64), 0)


def perplexity(model: SequenceModel, records: Sequence[Hypnogram]) -> float:
    """Per-epoch perplexity over all records; history resets at each record."""
    if not records:
        raise ValueError("perplexity needs at least one record")
    total = 0.0
    n = 0
    all_idx = [rec.indices() for rec in records]
    for rec, idx, probs in zip(records, all_idx, model.stage_probs_many(all_idx)):
        bad = np.flatnonzero(~(probs > 0))
        if bad.size:
            e = int(bad[0])
            raise ZeroProbabilityError(rec.record_id, e, STAGES[idx[e]])
        total += float(np.log(probs).sum())
        n += len(idx)
    return math.exp(-total / n)


def _paired(pred: Hypnogram | Sequence[int], ref: Hypnogram | Sequence[int]):
    a = pred.indices() if isinstance(pred, Hypnogram) else np.asarray(pred, dtype=np.int64)
    b = ref.indices() if isinstance(ref, Hypnogram) else np.asarray(ref, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} predicted vs {b.size} reference epochs")
    if a.size == 0:
        raise ValueError("cannot score empty sequences")
    return a.astype(np.int64), b.astype(np.int64)


def accuracy(pred, ref) -> float:
    a, b = _paired(pred, ref)
    return float(np.count_nonzero(a == b)) / a.size


def cohen_kappa(pred, ref) -> float:
    """Two-rater Cohen's kappa. Returns 1.0 when both raters are the same constant."""
    a, b = _paired(pred, ref)
    t = a.size
    p_o = np.count_nonzero(a == b) / t
    pa = np.bincount(a, minlength=N_STAGES) / t
    pb = np.bincount(b, minlength=N_STAGES) / t
    p_e = float(pa @ pb)
    if p_e == 1.0:
        return 1.0
    return (p_o - p_e) / (1.0 - p_e)
