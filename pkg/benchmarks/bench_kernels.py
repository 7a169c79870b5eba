"""Time the compiled kernels against the numpy/pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each case runs the same inputs through every available backend and checks
that the outputs agree before reporting timings.
"""

import argparse
import time

import numpy as np

from sleepmodel import ngram, simulator
from sleepmodel.kernels import implementations


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases():
    rng = np.random.default_rng(0)

    chain = simulator.table1_chain()
    corpus = simulator.sample_corpus(chain, 60, 960, seed=1)
    bigram = ngram.train_ngram(corpus, 2)
    trigram = ngram.train_ngram(simulator.sample_corpus(simulator.fixture_source(), 60, 960, 2), 4)
    lik = [rng.dirichlet(np.full(5, 0.6), size=960) for _ in range(3)]

    for name, model, width in [("beam bigram W=128", bigram, 128),
                               ("beam 4-gram W=128", trigram, 128),
                               ("beam 4-gram W=16", trigram, 16)]:
        log_slm, nxt, start = model.dense_tables()
        log_sig = [np.log(np.maximum(m, 1e-12)) for m in lik]
        yield name, "3 x 960 epochs", lambda k, ls=log_sig, lm=log_slm, nx=nxt, st=start, w=width: [
            k.beam_search_dense(x, lm, nx, st, 0.42, w) for x in ls]

    cum = np.cumsum(simulator.fixture_source().table, axis=1)
    u = rng.random(1_000_000)
    yield "sample order-3 chain", "1e6 epochs", lambda k: k.sample_chain(cum, u, 0, 125)


def same(a, b):
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    impls = implementations()
    names = sorted(impls)
    print(f"{'case':<26}{'size':<16}" + "".join(f"{n:>12}" for n in names) + f"{'speedup':>10}")
    for label, size, run in cases():
        results = {n: best_of(lambda: run(impls[n]), args.repeat) for n in names}
        outs = [r[1] for r in results.values()]
        if not all(same(outs[0], o) for o in outs[1:]):
            raise SystemExit(f"backends disagree on {label!r}")
        line = f"{label:<26}{size:<16}" + "".join(f"{results[n][0] * 1e3:>10.1f}ms" for n in names)
        if "cython" in results:
            line += f"{results['python'][0] / results['cython'][0]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
