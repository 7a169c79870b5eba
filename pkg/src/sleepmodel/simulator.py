"""Synthetic hypnograms and signal-model likelihoods.

Stage sequences come from finite-context sources (a first-order Markov
chain built from a clinical bigram table, or higher-order tables).
A confusion-matrix channel turns true stages into per-epoch posterior
rows that stand in for a trained signal model.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .core import N_STAGES, STAGE_TOKENS, Hypnogram, SleepStage, check_distribution
from .io import FormatError

# Stage-bigram probabilities measured on clinical recordings, rows = previous stage,
# columns = next stage, canonical order W, REM, N1, N2, N3. Rows as printed
# sum to 0.996..0.999 because of rounding.
TABLE1 = np.array([
    [0.854, 0.001, 0.138, 0.003, 0.000],
    [0.016, 0.907, 0.066, 0.010, 0.000],
    [0.109, 0.080, 0.498, 0.311, 0.000],
    [0.019, 0.014, 0.062, 0.864, 0.040],
    [0.007, 0.001, 0.007, 0.063, 0.921],
])

DEFAULT_RECORD_LENGTH = 960
DEFAULT_EMISSION_DIAGONAL = 0.6
STOCHASTIC_ATOL = 1e-9


class ConvergenceError(ArithmeticError):
    pass


def _check_stochastic(m, name):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != N_STAGES:
        raise ValueError(f"{name} must have {N_STAGES} columns")
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(m.sum(axis=1) - 1.0) > STOCHASTIC_ATOL):
        raise ValueError(f"{name} rows must sum to 1")
    return m


@dataclass(frozen=True, eq=False)
class HigherOrderSource:
    """Stage source whose next stage depends on the previous ``order`` stages.

    ``table`` has one row per length-``order`` context, indexed in base 5
    with the oldest stage most significant. ``initial`` is a distribution
    over those contexts; a sampled record starts with the drawn context.
    """

    order: int
    table: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        n_ctx = N_STAGES ** self.order
        table = _check_stochastic(self.table, "conditional table")
        if table.shape[0] != n_ctx:
            raise ValueError(f"expected {n_ctx} conditional rows")
        init = np.asarray(self.initial, dtype=np.float64)
        if init.shape != (n_ctx,) or np.any(init < 0) or abs(init.sum() - 1) > STOCHASTIC_ATOL:
            raise ValueError("initial must be a distribution over contexts")
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "initial", init)

    def row(self, context) -> np.ndarray:
        cid = 0
        for s in context:
            cid = cid * N_STAGES + int(s)
        return self.table[cid]


class MarkovChain(HigherOrderSource):
    """First-order chain: ``transition[i, j] = P(next = j | current = i)``."""

    def __init__(self, transition, initial=None):
        transition = _check_stochastic(transition, "transition matrix")
        if transition.shape != (N_STAGES, N_STAGES):
            raise ValueError("transition matrix must be 5 x 5")
        if initial is None:
            initial = np.eye(N_STAGES)[SleepStage.W]
        super().__init__(1, transition, check_distribution(initial))

    @property
    def transition(self) -> np.ndarray:
        return self.table


@dataclass(frozen=True, eq=False)
class EmissionModel:
    """``confusion[t, o] = P(observed o | true stage t)``."""

    confusion: np.ndarray

    def __post_init__(self):
        m = _check_stochastic(self.confusion, "confusion matrix")
        if m.shape != (N_STAGES, N_STAGES):
            raise ValueError("confusion matrix must be 5 x 5")
        object.__setattr__(self, "confusion", m)

    @classmethod
    def symmetric(cls, diagonal: float = DEFAULT_EMISSION_DIAGONAL) -> "EmissionModel":
        off = (1.0 - diagonal) / (N_STAGES - 1)
        m = np.full((N_STAGES, N_STAGES), off)
        np.fill_diagonal(m, diagonal)
        return cls(m)

    @classmethod
    def identity(cls) -> "EmissionModel":
        return cls(np.eye(N_STAGES))


def table1_chain(start: str = "W") -> MarkovChain:
    """Row-renormalized bigram table; starts in W or at the stationary law."""
    p = TABLE1 / TABLE1.sum(axis=1, keepdims=True)
    if start == "stationary":
        return MarkovChain(p, stationary_distribution(p))
    return MarkovChain(p, np.eye(N_STAGES)[SleepStage.from_token(start)])


def _is_irreducible(p: np.ndarray) -> bool:
    adj = (p > 0).astype(np.int64) + np.eye(len(p), dtype=np.int64)
    reach = np.linalg.matrix_power(adj, len(p) - 1)
    return bool(np.all(reach > 0))


def _power_iterate(p, pi, tol, max_iter):
    lazy = 0.5 * (p + np.eye(len(p)))
    for _ in range(max_iter):
        nxt = pi @ lazy
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - pi)) < tol:
            return nxt
        pi = nxt
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps")


def stationary_distribution(transition, tol: float = 1e-12, max_iter: int = 1_000_000
                            ) -> np.ndarray:
    """Stationary law by power iteration on the lazy chain (I + P) / 2.

    The lazy chain has the same stationary law and is aperiodic, so the
    iteration converges for every irreducible chain.
    """
    p = np.asarray(transition, dtype=np.float64)
    if not _is_irreducible(p):
        raise ValueError("chain is reducible; stationary distribution is not unique")
    return _power_iterate(p, np.full(len(p), 1.0 / len(p)), tol, max_iter)


def entropy_rate_perplexity(chain: MarkovChain | np.ndarray) -> float:
    """exp of the entropy rate: the best achievable perplexity on the chain's output."""
    p = chain.transition if isinstance(chain, MarkovChain) else np.asarray(chain, dtype=float)
    pi = stationary_distribution(p)
    logs = np.log(np.where(p > 0, p, 1.0))
    return math.exp(-float(pi @ (p * logs).sum(axis=1)))


def source_entropy_perplexity(source: HigherOrderSource) -> float:
    """Entropy-rate perplexity of a higher-order source.

    Runs the chain over contexts from the source's initial law, so
    contexts the source can never produce carry no weight.
    """
    n_ctx = N_STAGES ** source.order
    ctx = np.arange(n_ctx)
    lifted = np.zeros((n_ctx, n_ctx))
    for s in range(N_STAGES):
        lifted[ctx, (ctx * N_STAGES + s) % n_ctx] += source.table[:, s]
    pi = _power_iterate(lifted, source.initial, 1e-13, 1_000_000)
    t = source.table
    logs = np.log(np.where(t > 0, t, 1.0))
    return math.exp(-float(pi @ (t * logs).sum(axis=1)))


def sample_hypnogram(source: HigherOrderSource, length: int, seed,
                     record_id: str = "rec-0") -> Hypnogram:
    """Draw ``length`` epochs; deterministic for a given ``seed``."""
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    k = source.order
    n_ctx = N_STAGES ** k
    start = int(rng.choice(n_ctx, p=source.initial))
    first = np.array([(start // N_STAGES ** (k - 1 - j)) % N_STAGES for j in range(k)],
                     dtype=np.int8)
    if length <= k:
        return Hypnogram.from_indices(record_id, first[:length])
    cum = np.cumsum(source.table, axis=1)
    cum /= cum[:, -1:]
    rest = kernels.sample_chain(cum, rng.random(length - k), start, n_ctx)
    return Hypnogram.from_indices(record_id, np.concatenate([first, rest]))


def sample_corpus(source: HigherOrderSource, n_records: int, length: int, seed,
                  prefix: str = "rec") -> list[Hypnogram]:
    seeds = np.random.SeedSequence(seed).spawn(n_records)
    width = max(4, len(str(n_records - 1)))
    return [sample_hypnogram(source, length, s, f"{prefix}-{i:0{width}d}")
            for i, s in enumerate(seeds)]


def emit_likelihoods(truth: Hypnogram, emission: EmissionModel, seed) -> np.ndarray:
    """Uniform-prior posterior rows P(stage | observed symbol), one per epoch."""
    m = emission.confusion
    col = m.sum(axis=0)
    rng = np.random.default_rng(seed)
    t = truth.indices().astype(np.int64)
    cum = np.cumsum(m, axis=1)
    cum /= cum[:, -1:]
    u = rng.random(t.size)
    obs = np.minimum((cum[t] <= u[:, None]).sum(axis=1), N_STAGES - 1)
    if np.any(col[obs] <= 0):
        raise ValueError("observed symbol is impossible under every stage")
    return (m[:, obs] / col[obs]).T


def perturbed_source(base: np.ndarray, order: int, strength: float, seed: int,
                     start: str = "W") -> HigherOrderSource:
    """Order-``order`` source: ``base`` rows reweighted by context-dependent noise.

    Row for context (..., c) is ``base[c] * exp(strength * g)`` renormalized,
    with ``g`` a fixed standard normal draw per (context, next stage).
    Structural zeros of ``base`` stay zero.
    """
    base = _check_stochastic(base, "base matrix")
    rng = np.random.default_rng(seed)
    n_ctx = N_STAGES ** order
    last = np.arange(n_ctx) % N_STAGES
    g = rng.standard_normal((n_ctx, N_STAGES))
    rows = base[last] * np.exp(strength * g)
    rows /= rows.sum(axis=1, keepdims=True)
    init = np.zeros(n_ctx)
    s = SleepStage.from_token(start)
    init[sum(int(s) * N_STAGES ** j for j in range(order))] = 1.0
    return HigherOrderSource(order, rows, init)


# Source file: "SLM-SOURCE v1 order=<k>", then "<ctx tokens> | <5 probs>" rows
# and "initial <ctx tokens> | <prob>" rows for contexts with initial mass.

def format_source(source: HigherOrderSource) -> str:
    lines = [f"SLM-SOURCE v1 order={source.order}"]
    contexts = list(itertools.product(range(N_STAGES), repeat=source.order))
    for cid, ctx in enumerate(contexts):
        if source.initial[cid] > 0:
            toks = " ".join(STAGE_TOKENS[s] for s in ctx)
            lines.append(f"initial {toks} | {float(source.initial[cid])!r}")
    for cid, ctx in enumerate(contexts):
        toks = " ".join(STAGE_TOKENS[s] for s in ctx)
        lines.append(f"{toks} | " + " ".join(repr(float(x)) for x in source.table[cid]))
    return "\n".join(lines) + "\n"


def parse_source(text: str) -> HigherOrderSource:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[:2] != ["SLM-SOURCE", "v1"] or not head[2].startswith("order="):
        raise FormatError("malformed SLM-SOURCE header", 1)
    order = int(head[2][len("order="):])
    n_ctx = N_STAGES ** order
    table = np.full((n_ctx, N_STAGES), np.nan)
    init = np.zeros(n_ctx)
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        left, _, right = raw.partition("|")
        toks = left.split()
        is_init = bool(toks) and toks[0] == "initial"
        if is_init:
            toks = toks[1:]
        if len(toks) != order:
            raise FormatError(f"context must have {order} stages", lineno)
        try:
            cid = 0
            for t in toks:
                cid = cid * N_STAGES + SleepStage.from_token(t)
            vals = [float(x) for x in right.split()]
        except ValueError as exc:
            raise FormatError(str(exc), lineno) from None
        if is_init:
            if len(vals) != 1:
                raise FormatError("initial row takes one probability", lineno)
            init[cid] = vals[0]
        else:
            if len(vals) != N_STAGES:
                raise FormatError(f"expected {N_STAGES} probabilities", lineno)
            table[cid] = vals
    if np.isnan(table).any():
        raise FormatError("missing conditional rows")
    try:
        return HigherOrderSource(order, table, init)
    except ValueError as exc:
        raise FormatError(str(exc)) from None


def load_source(path: str | Path) -> HigherOrderSource:
    return parse_source(Path(path).read_text(encoding="utf-8"))


# Default higher-order fixture: a 4-gram source (three stages of context)
# built from the table1 chain; regenerate with ``make_fixture_source()``.
FIXTURE_ORDER = 3
FIXTURE_STRENGTH = 1.0
FIXTURE_SEED = 20230


def make_fixture_source() -> HigherOrderSource:
    return perturbed_source(table1_chain().transition, FIXTURE_ORDER,
                            FIXTURE_STRENGTH, FIXTURE_SEED)


def fixture_source() -> HigherOrderSource:
    text = resources.files("sleepmodel").joinpath("data/order3_source.txt").read_text(
        encoding="utf-8")
    return parse_source(text)


def simulate_dataset(source: HigherOrderSource, emission: EmissionModel, n_records: int,
                     length: int = DEFAULT_RECORD_LENGTH, seed=0, prefix: str = "rec"
                     ) -> list[tuple[np.ndarray, Hypnogram]]:
    """Paired (likelihood matrix, true hypnogram) records from one seed."""
    truth = sample_corpus(source, n_records, length, [seed, 0], prefix)
    seeds = np.random.SeedSequence([seed, 1]).spawn(n_records)
    return [(emit_likelihoods(h, emission, s), h) for h, s in zip(truth, seeds)]
