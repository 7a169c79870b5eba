"""Reference (numpy / pure Python) implementations of the hot loops.

``sample_chain`` and ``beam_search_dense`` have compiled twins in
``_ckernels`` with identical results; those are preferred when built.
"""

from bisect import bisect_right

import numpy as np


def encode_contexts(padded, m, n_pad):
    """Base-6 id of the length-``m`` context preceding each real position.

    ``padded`` holds ``n_pad`` boundary tokens followed by the record; the
    oldest context token is the most significant digit.
    """
    padded = np.asarray(padded, dtype=np.int64)
    t = padded.size - n_pad
    ids = np.zeros(t, dtype=np.int64)
    start = n_pad - m
    for j in range(m):
        ids = ids * 6 + padded[start + j:start + j + t]
    return ids


def sample_chain(cum_rows, uniforms, start_state, n_states):
    """Walk a finite-context chain.

    ``cum_rows[state]`` is the cumulative next-stage distribution. The state
    after emitting ``s`` is ``(state * 5 + s) % n_states``.
    """
    rows = np.asarray(cum_rows, dtype=np.float64).tolist()
    out = np.empty(len(uniforms), dtype=np.int8)
    state = int(start_state)
    for i, u in enumerate(np.asarray(uniforms, dtype=np.float64).tolist()):
        row = rows[state]
        s = min(bisect_right(row, u), 4)
        out[i] = s
        state = (state * 5 + s) % n_states
    return out


def select_top(cand, width):
    """Indices of the best ``width`` candidates in ascending index order.

    Ranking is by score, ties going to the lower index. Candidate indices
    enumerate hypotheses in lexicographic order, so index order is
    lexicographic stage-sequence order.
    """
    n = cand.size
    if n <= width:
        return np.arange(n)
    order = np.argsort(-cand, kind="stable")
    return np.sort(order[:width])


def beam_search_dense(log_sig, log_slm, next_state, start_state, alpha, width):
    """Beam search over a finite-state prior.

    Returns ``(path, score)`` with path an int8 array of stage indices.
    """
    log_sig = np.asarray(log_sig, dtype=np.float64)
    log_slm = np.asarray(log_slm, dtype=np.float64)
    next_state = np.asarray(next_state, dtype=np.int64)
    t_len = log_sig.shape[0]
    states = np.array([start_state], dtype=np.int64)
    scores = np.zeros(1)
    parents = []
    for e in range(t_len):
        step = log_sig[e][None, :] + alpha * log_slm[states]
        cand = (scores[:, None] + step).ravel()
        keep = select_top(cand, width)
        hyp, stage = np.divmod(keep, 5)
        parents.append((hyp, stage))
        scores = cand[keep]
        states = next_state[states[hyp], stage]
    best = int(np.argmax(scores))
    score = float(scores[best])
    path = np.empty(t_len, dtype=np.int8)
    j = best
    for e in range(t_len - 1, -1, -1):
        hyp, stage = parents[e]
        path[e] = stage[j]
        j = int(hyp[j])
    return path, score
