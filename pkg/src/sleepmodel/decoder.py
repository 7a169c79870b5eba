"""Greedy and beam-search decoding of signal-model likelihoods.

Beam search scores each extension of a hypothesis by

    ln P_sig(s_e) + alpha * ln P_slm(s_e | stages so far)

and keeps the ``beam_width`` best partial sequences after every epoch.
Ties are broken towards the lexicographically smaller stage sequence.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .core import N_STAGES, Hypnogram, SequenceModel, accuracy, check_likelihoods, cohen_kappa

SIGNAL_FLOOR = 1e-12
# keeps alpha * ln P finite when a prior underflows
PRIOR_FLOOR = 1e-300

DEFAULT_ALPHA_GRID = (0.34, 0.38, 0.42, 0.46, 0.50)
DEFAULT_BEAM_WIDTH = 128


@dataclass(frozen=True)
class DecoderConfig:
    alpha: float = 0.42
    beam_width: int = DEFAULT_BEAM_WIDTH

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if int(self.beam_width) != self.beam_width or self.beam_width < 1:
            raise ValueError("beam_width must be a positive integer")


def log_signal(likelihoods) -> np.ndarray:
    m = check_likelihoods(likelihoods)
    return np.log(np.maximum(m, SIGNAL_FLOOR))


def greedy_decode(likelihoods, record_id: str = "decoded") -> Hypnogram:
    """Per-epoch argmax; ties go to the lowest stage index."""
    m = check_likelihoods(likelihoods)
    return Hypnogram.from_indices(record_id, np.argmax(m, axis=1))


def beam_decode(likelihoods, slm: SequenceModel, config: DecoderConfig,
                record_id: str = "decoded") -> tuple[Hypnogram, float]:
    """Best stage sequence under the fused score, and its total log score."""
    ls = log_signal(likelihoods)
    tables = slm.dense_tables()
    if tables is not None:
        log_slm, next_state, start = tables
        log_slm = np.maximum(log_slm, np.log(PRIOR_FLOOR))
        path, score = kernels.beam_search_dense(ls, log_slm, next_state, start,
                                                float(config.alpha), int(config.beam_width))
    else:
        path, score = _beam_generic(ls, slm, float(config.alpha), int(config.beam_width))
    return Hypnogram.from_indices(record_id, path), float(score)


def _beam_generic(ls, slm, alpha, width):
    # Same search as kernels.beam_search_dense, for models without finite tables.
    states = [slm.initial_state()]
    scores = np.zeros(1)
    parents = []
    for e in range(ls.shape[0]):
        prior = np.log(np.maximum(slm.predict_batch(states), PRIOR_FLOOR))
        step = ls[e][None, :] + alpha * prior
        cand = (scores[:, None] + step).ravel()
        keep = kernels.select_top(cand, width)
        hyp, stage = np.divmod(keep, N_STAGES)
        parents.append((hyp, stage))
        scores = cand[keep]
        states = slm.advance_batch([states[h] for h in hyp.tolist()], stage.tolist())
    best = int(np.argmax(scores))
    path = np.empty(ls.shape[0], dtype=np.int8)
    j = best
    for e in range(ls.shape[0] - 1, -1, -1):
        hyp, stage = parents[e]
        path[e] = stage[j]
        j = int(hyp[j])
    return path, float(scores[best])


def fused_score(likelihoods, slm: SequenceModel, stages: Sequence[int], alpha: float) -> float:
    """Total fused log score of one stage sequence, summed epoch by epoch."""
    ls = log_signal(likelihoods)
    total = 0.0
    state = slm.initial_state()
    for e, s in enumerate(stages):
        prior = np.log(max(slm.next_distribution(state)[int(s)], PRIOR_FLOOR))
        total = total + (ls[e, int(s)] + alpha * prior)
        state = slm.advance(state, int(s))
    return float(total)


class SweepError(RuntimeError):
    """Decoding failed at one grid point; the original error is ``__cause__``."""

    def __init__(self, alpha, width, record_id, exc):
        self.alpha, self.width, self.record_id = alpha, width, record_id
        super().__init__(f"alpha={alpha} width={width} record {record_id!r}: {exc}")


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    width: int
    kappa: float
    accuracy: float


def _decode_point(args):
    records, slm, alpha, width = args
    preds, refs = [], []
    for lik, ref in records:
        try:
            pred, _ = beam_decode(lik, slm, DecoderConfig(alpha, width))
        except (ValueError, ArithmeticError) as exc:
            raise SweepError(alpha, width, ref.record_id, exc) from exc
        preds.append(pred.indices())
        refs.append(ref.indices())
    p = np.concatenate(preds)
    r = np.concatenate(refs)
    return SweepRow(alpha, width, cohen_kappa(p, r), accuracy(p, r))


def sweep(records: Sequence[tuple[np.ndarray, Hypnogram]], slm: SequenceModel,
          alphas: Sequence[float], widths: Sequence[int], jobs: int = 1) -> list[SweepRow]:
    """Decode every record at every (alpha, width) grid point.

    Accuracy and kappa are computed over the concatenation of all records.
    Rows come back sorted by (alpha, width) whatever ``jobs`` is.
    """
    if not records or not alphas or not widths:
        raise ValueError("sweep needs records and non-empty grids")
    for lik, ref in records:
        if len(lik) != len(ref):
            raise ValueError(f"record {ref.record_id!r}: {len(lik)} likelihood rows "
                             f"for {len(ref)} epochs")
    grid = sorted(itertools.product((float(a) for a in alphas), (int(w) for w in widths)))
    tasks = [(records, slm, a, w) for a, w in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_decode_point, tasks))
    return [_decode_point(t) for t in tasks]


def format_sweep(rows: Sequence[SweepRow]) -> str:
    lines = ["alpha,width,kappa,accuracy"]
    for r in rows:
        lines.append(f"{r.alpha:.6f},{r.width},{r.kappa:.6f},{r.accuracy:.6f}")
    return "\n".join(lines) + "\n"
