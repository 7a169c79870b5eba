import itertools

import numpy as np
import pytest
import scipy.linalg

from sleepmodel import simulator
from sleepmodel.core import Hypnogram, SleepStage, UniformModel, accuracy, perplexity
from sleepmodel.decoder import greedy_decode
from sleepmodel.io import FormatError
from sleepmodel.ngram import train_ngram
from sleepmodel.simulator import (
    TABLE1,
    EmissionModel,
    HigherOrderSource,
    MarkovChain,
    emit_likelihoods,
    entropy_rate_perplexity,
    format_source,
    parse_source,
    sample_corpus,
    sample_hypnogram,
    simulate_dataset,
    source_entropy_perplexity,
    stationary_distribution,
    table1_chain,
)

W, REM, N1, N2, N3 = SleepStage

# exp of the entropy rate of the row-renormalized table, from an eigen-solver
TABLE1_ENTROPY_PPL = 1.7065140779562165


def eig_stationary(p):
    v = scipy.linalg.null_space(p.T - np.eye(len(p)))[:, 0]
    return v / v.sum()


def test_table1_entries():
    assert TABLE1[N1, N2] == 0.311
    assert TABLE1[W].sum() == pytest.approx(0.996)
    p = table1_chain().transition
    assert p[W].sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert p[W, W] == pytest.approx(0.854 / 0.996, rel=1e-12)
    assert p[W, W] == pytest.approx(0.8574, abs=5e-5)


def test_table1_start_options():
    assert table1_chain().initial.tolist() == [1, 0, 0, 0, 0]
    np.testing.assert_allclose(table1_chain("stationary").initial,
                               eig_stationary(table1_chain().transition), atol=1e-10)
    assert table1_chain("REM").initial.tolist() == [0, 1, 0, 0, 0]
    with pytest.raises(ValueError):
        table1_chain("awake")


def test_identity_chain_is_absorbing():
    h = sample_hypnogram(MarkovChain(np.eye(5)), 50, seed=3)
    assert h.indices().tolist() == [W] * 50


def test_sampling_is_deterministic():
    a = sample_corpus(table1_chain(), 3, 200, seed=9)
    b = sample_corpus(table1_chain(), 3, 200, seed=9)
    c = sample_corpus(table1_chain(), 3, 200, seed=10)
    assert a == b
    assert a != c
    assert [r.record_id for r in a] == ["rec-0000", "rec-0001", "rec-0002"]


def test_empirical_transitions_match_generator():
    chain = table1_chain()
    seq = sample_hypnogram(chain, 1_000_000, seed=123).indices().astype(np.int64)
    counts = np.zeros((5, 5))
    np.add.at(counts, (seq[:-1], seq[1:]), 1)
    freq = counts / counts.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(freq, chain.transition, atol=0.005)


def test_bigram_recovers_generator(table1_bigram, table1):
    for s in range(5):
        np.testing.assert_allclose(table1_bigram.prob([s]), table1.transition[s], atol=0.01)


def test_stationary_matches_eigen_solver(table1):
    pi = stationary_distribution(table1.transition)
    np.testing.assert_allclose(pi, eig_stationary(table1.transition), atol=1e-10)


def test_stationary_rejects_reducible_chain():
    with pytest.raises(ValueError):
        stationary_distribution(np.eye(5))
    with pytest.raises(ValueError):
        entropy_rate_perplexity(np.eye(5))


def test_entropy_rate_values(table1):
    assert entropy_rate_perplexity(np.full((5, 5), 0.2)) == pytest.approx(5.0, rel=1e-12)
    assert entropy_rate_perplexity(table1) == pytest.approx(TABLE1_ENTROPY_PPL, rel=1e-9)
    # independent recomputation through the eigen-solver
    p = table1.transition
    pi = eig_stationary(p)
    h = -np.sum(pi[:, None] * p * np.log(np.where(p > 0, p, 1.0)))
    assert entropy_rate_perplexity(table1) == pytest.approx(np.exp(h), rel=1e-9)


def test_perplexity_floor(table1, table1_corpus, table1_heldout):
    floor = entropy_rate_perplexity(table1)
    assert perplexity(UniformModel(), table1_heldout) >= floor - 0.02
    assert perplexity(train_ngram(table1_corpus, 2), table1_heldout) >= floor - 0.02
    assert perplexity(train_ngram(table1_corpus, 1), table1_heldout) >= floor - 0.02


def test_order1_source_entropy_agrees(table1):
    src = HigherOrderSource(1, table1.transition, np.full(5, 0.2))
    assert source_entropy_perplexity(src) == pytest.approx(entropy_rate_perplexity(table1),
                                                           rel=1e-9)


# --- emission -----------------------------------------------------------

def test_identity_channel_is_noiseless():
    truth = sample_hypnogram(table1_chain(), 500, seed=4)
    lik = emit_likelihoods(truth, EmissionModel.identity(), seed=5)
    np.testing.assert_array_equal(lik, np.eye(5)[truth.indices()])
    assert accuracy(greedy_decode(lik), truth) == 1.0


def test_uniform_channel_is_uninformative():
    truth = sample_hypnogram(table1_chain(), 100, seed=4)
    lik = emit_likelihoods(truth, EmissionModel(np.full((5, 5), 0.2)), seed=5)
    np.testing.assert_allclose(lik, 0.2, atol=1e-15)


def test_noisy_channel_reaches_bayes_accuracy():
    emission = EmissionModel.symmetric(0.6)
    c = emission.confusion
    assert c[0, 0] == 0.6 and c[0, 1] == pytest.approx(0.1)
    # enumerate the 25 (true, observed) pairs under a uniform stage prior
    bayes = 0.0
    for t, o in itertools.product(range(5), repeat=2):
        posterior = c[:, o] / c[:, o].sum()
        bayes += 0.2 * c[t, o] * (int(np.argmax(posterior)) == t)
    assert bayes == pytest.approx(0.6)
    truth = Hypnogram.from_indices("u", np.random.default_rng(8).integers(0, 5, 100_000))
    lik = emit_likelihoods(truth, emission, seed=9)
    assert accuracy(greedy_decode(lik), truth) == pytest.approx(bayes, abs=0.01)


def test_emission_rows_are_posteriors():
    truth = sample_hypnogram(table1_chain(), 300, seed=1)
    c = np.array([[0.7, 0.2, 0.1, 0, 0], [0.1, 0.8, 0.1, 0, 0], [0, 0.1, 0.8, 0.1, 0],
                  [0, 0, 0.2, 0.7, 0.1], [0, 0, 0, 0.3, 0.7]])
    lik = emit_likelihoods(truth, EmissionModel(c), seed=2)
    cols = c / c.sum(axis=0, keepdims=True)
    # every emitted row is one of the normalized confusion columns
    for row in lik:
        assert np.min(np.abs(cols.T - row).sum(axis=1)) < 1e-12


def test_emission_validation():
    with pytest.raises(ValueError):
        EmissionModel(np.full((5, 5), 0.3))
    with pytest.raises(ValueError):
        EmissionModel(np.eye(4))


# --- higher-order sources -----------------------------------------------

def test_fixture_file_matches_generator():
    shipped = simulator.fixture_source()
    rebuilt = simulator.make_fixture_source()
    assert shipped.order == simulator.FIXTURE_ORDER == 3
    np.testing.assert_array_equal(shipped.table, rebuilt.table)
    np.testing.assert_array_equal(shipped.initial, rebuilt.initial)


def test_source_text_round_trip():
    src = simulator.perturbed_source(table1_chain().transition, 2, 0.7, seed=5)
    back = parse_source(format_source(src))
    np.testing.assert_array_equal(back.table, src.table)
    np.testing.assert_array_equal(back.initial, src.initial)


@pytest.mark.parametrize("text", [
    "",
    "SLM-SOURCE v1 order=1\n",
    "SLM-SOURCE v1 order=1\ninitial W | 1\nW | 1 0 0 0\n",
    "SLM-SOURCE v1 order=1\ninitial W W | 1\n",
])
def test_source_parse_errors(text):
    with pytest.raises(FormatError):
        parse_source(text)


def test_higher_order_sampling_follows_table():
    src = simulator.fixture_source()
    seq = sample_hypnogram(src, 400_000, seed=17).indices().astype(np.int64)
    ctx = seq[:-3] * 25 + seq[1:-2] * 5 + seq[2:-1]
    nxt = seq[3:]
    counts = np.zeros((125, 5))
    np.add.at(counts, (ctx, nxt), 1)
    seen = counts.sum(axis=1) > 5000
    assert seen.sum() >= 10
    freq = counts[seen] / counts[seen].sum(axis=1, keepdims=True)
    np.testing.assert_allclose(freq, src.table[seen], atol=0.02)


def test_fixture_source_has_memory_beyond_one_step():
    src = simulator.fixture_source()
    assert source_entropy_perplexity(src) < entropy_rate_perplexity(table1_chain())


def test_simulate_dataset_is_reproducible():
    em = EmissionModel.symmetric(0.6)
    a = simulate_dataset(table1_chain(), em, 3, 50, seed=4)
    b = simulate_dataset(table1_chain(), em, 3, 50, seed=4)
    for (la, ha), (lb, hb) in zip(a, b):
        assert ha == hb
        np.testing.assert_array_equal(la, lb)
        assert la.shape == (50, 5)


def test_sample_length_validation():
    with pytest.raises(ValueError):
        sample_hypnogram(table1_chain(), 0, seed=1)
