# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Same contracts as ``_pykernels``."""

import numpy as np

from libc.stdlib cimport malloc, free
from libc.string cimport memcpy
from libc.stdint cimport int64_t, int8_t


ctypedef struct Cand:
    double score
    Py_ssize_t idx


cdef inline bint _better(Cand a, Cand b) noexcept nogil:
    # higher score first, then lower index
    return a.score > b.score or (a.score == b.score and a.idx < b.idx)


cdef Cand _kth_best(Cand* buf, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    """Quickselect: the k-th best (0-based) candidate; reorders ``buf``."""
    cdef Py_ssize_t lo = 0, hi = n - 1, i, j, mid
    cdef Cand pivot, tmp
    while lo < hi:
        mid = lo + (hi - lo) // 2
        # median of three as pivot
        if _better(buf[mid], buf[lo]):
            tmp = buf[mid]; buf[mid] = buf[lo]; buf[lo] = tmp
        if _better(buf[hi], buf[lo]):
            tmp = buf[hi]; buf[hi] = buf[lo]; buf[lo] = tmp
        if _better(buf[hi], buf[mid]):
            tmp = buf[hi]; buf[hi] = buf[mid]; buf[mid] = tmp
        pivot = buf[mid]
        i = lo
        j = hi
        while i <= j:
            while _better(buf[i], pivot):
                i += 1
            while _better(pivot, buf[j]):
                j -= 1
            if i <= j:
                tmp = buf[i]; buf[i] = buf[j]; buf[j] = tmp
                i += 1
                j -= 1
        if k <= j:
            hi = j
        elif k >= i:
            lo = i
        else:
            break
    return buf[k]


def sample_chain(cum_rows, uniforms, Py_ssize_t start_state, Py_ssize_t n_states):
    cdef const double[:, ::1] cum = np.ascontiguousarray(cum_rows, dtype=np.float64)
    cdef const double[::1] u = np.ascontiguousarray(uniforms, dtype=np.float64)
    cdef Py_ssize_t n = u.shape[0]
    out = np.empty(n, dtype=np.int8)
    cdef int8_t[::1] res = out
    cdef Py_ssize_t i, s, state = start_state
    cdef double x
    for i in range(n):
        x = u[i]
        s = 0
        while s < 4 and cum[state, s] <= x:
            s += 1
        res[i] = <int8_t>s
        state = (state * 5 + s) % n_states
    return out


def beam_search_dense(log_sig, log_slm, next_state, Py_ssize_t start_state,
                      double alpha, Py_ssize_t width):
    cdef const double[:, ::1] ls = np.ascontiguousarray(log_sig, dtype=np.float64)
    cdef const double[:, ::1] lm = np.ascontiguousarray(log_slm, dtype=np.float64)
    cdef const int64_t[:, ::1] nxt = np.ascontiguousarray(next_state, dtype=np.int64)
    cdef Py_ssize_t t_len = ls.shape[0]
    if width < 1:
        raise ValueError("width must be >= 1")

    cdef Py_ssize_t max_hyp = width
    back_hyp_arr = np.empty((t_len, max_hyp), dtype=np.int64)
    back_stage_arr = np.empty((t_len, max_hyp), dtype=np.int8)
    cdef int64_t[:, ::1] back_hyp = back_hyp_arr
    cdef int8_t[:, ::1] back_stage = back_stage_arr

    cdef double* scores = <double*>malloc(max_hyp * sizeof(double))
    cdef double* new_scores = <double*>malloc(max_hyp * sizeof(double))
    cdef int64_t* states = <int64_t*>malloc(max_hyp * sizeof(int64_t))
    cdef int64_t* new_states = <int64_t*>malloc(max_hyp * sizeof(int64_t))
    cdef Cand* cand = <Cand*>malloc(5 * max_hyp * sizeof(Cand))
    cdef Cand* work = <Cand*>malloc(5 * max_hyp * sizeof(Cand))
    if not (scores and new_scores and states and new_states and cand and work):
        free(scores); free(new_scores); free(states); free(new_states)
        free(cand); free(work)
        raise MemoryError()

    cdef Py_ssize_t n_hyp = 1, n_cand, n_keep, e, i, s, k, h, j, best
    cdef double* tmp_d
    cdef int64_t* tmp_i
    cdef double best_score, step
    cdef Cand cut
    scores[0] = 0.0
    states[0] = start_state
    try:
        with nogil:
            for e in range(t_len):
                n_cand = n_hyp * 5
                for i in range(n_hyp):
                    for s in range(5):
                        step = ls[e, s] + alpha * lm[states[i], s]
                        cand[i * 5 + s].score = scores[i] + step
                        cand[i * 5 + s].idx = i * 5 + s
                if n_cand > width:
                    memcpy(work, cand, n_cand * sizeof(Cand))
                    cut = _kth_best(work, n_cand, width - 1)
                    # candidates are in index (= lexicographic) order already
                    n_keep = 0
                    for k in range(n_cand):
                        if not _better(cut, cand[k]):
                            cand[n_keep] = cand[k]
                            n_keep += 1
                else:
                    n_keep = n_cand
                for k in range(n_keep):
                    h = cand[k].idx // 5
                    s = cand[k].idx % 5
                    back_hyp[e, k] = h
                    back_stage[e, k] = <int8_t>s
                    new_scores[k] = cand[k].score
                    new_states[k] = nxt[states[h], s]
                tmp_d = scores; scores = new_scores; new_scores = tmp_d
                tmp_i = states; states = new_states; new_states = tmp_i
                n_hyp = n_keep
            best = 0
            best_score = scores[0]
            for k in range(1, n_hyp):
                if scores[k] > best_score:
                    best_score = scores[k]
                    best = k
    finally:
        free(scores); free(new_scores); free(states); free(new_states)
        free(cand); free(work)

    path = np.empty(t_len, dtype=np.int8)
    cdef int8_t[::1] p = path
    j = best
    for e in range(t_len - 1, -1, -1):
        p[e] = back_stage[e, j]
        j = back_hyp[e, j]
    return path, best_score
