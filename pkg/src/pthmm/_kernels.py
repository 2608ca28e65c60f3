"""Compiled recursions over concatenated tracks.

All kernels take per-step effective transition matrices ``gam`` (T, N, N),
where ``gam[t]`` moves the chain from t - 1 to t, per-track initial vectors
``init`` (K, N), emission log-densities ``logf`` (T, N) and track boundaries
``starts`` (K + 1,). ``gam`` at a track's first step is ignored.
"""
import numpy as np
from numba import njit


@njit(cache=True, error_model="numpy")
def forward_loglik(logf, gam, init, starts):
    n = logf.shape[1]
    total = 0.0
    a = np.empty(n)
    nxt = np.empty(n)
    f = np.empty(n)
    for k in range(starts.size - 1):
        s, e = starts[k], starts[k + 1]
        for t in range(s, e):
            m = logf[t, 0]
            for j in range(1, n):
                if logf[t, j] > m:
                    m = logf[t, j]
            for j in range(n):
                f[j] = np.exp(logf[t, j] - m)
            if t == s:
                for j in range(n):
                    nxt[j] = init[k, j] * f[j]
            else:
                for j in range(n):
                    acc = 0.0
                    for i in range(n):
                        acc += a[i] * gam[t, i, j]
                    nxt[j] = acc * f[j]
            c = 0.0
            for j in range(n):
                c += nxt[j]
            for j in range(n):
                a[j] = nxt[j] / c
            total += np.log(c) + m
    return total


@njit(cache=True, error_model="numpy")
def forward_backward(logf, gam, init, starts):
    """Log-likelihood plus its derivatives.

    Returns (loglik, post, g_gam, g_init): ``post[t, j]`` is d loglik /
    d logf[t, j] (the smoothed state probability), ``g_gam[t]`` is
    d loglik / d gam[t] and ``g_init[k]`` is d loglik / d init[k].
    """
    T, n = logf.shape
    f = np.empty((T, n))
    ah = np.empty((T, n))
    bh = np.empty((T, n))
    c = np.empty(T)
    post = np.empty((T, n))
    g_gam = np.zeros((T, n, n))
    g_init = np.zeros((starts.size - 1, n))
    total = 0.0
    for k in range(starts.size - 1):
        s, e = starts[k], starts[k + 1]
        for t in range(s, e):
            m = logf[t, 0]
            for j in range(1, n):
                if logf[t, j] > m:
                    m = logf[t, j]
            for j in range(n):
                f[t, j] = np.exp(logf[t, j] - m)
            total += m
            if t == s:
                for j in range(n):
                    ah[t, j] = init[k, j] * f[t, j]
            else:
                for j in range(n):
                    acc = 0.0
                    for i in range(n):
                        acc += ah[t - 1, i] * gam[t, i, j]
                    ah[t, j] = acc * f[t, j]
            cc = 0.0
            for j in range(n):
                cc += ah[t, j]
            c[t] = cc
            for j in range(n):
                ah[t, j] /= cc
            total += np.log(cc)
        for j in range(n):
            bh[e - 1, j] = 1.0
        for t in range(e - 1, s, -1):
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += gam[t, i, j] * f[t, j] * bh[t, j]
                bh[t - 1, i] = acc / c[t]
            for i in range(n):
                for j in range(n):
                    g_gam[t, i, j] = ah[t - 1, i] * f[t, j] * bh[t, j] / c[t]
        for t in range(s, e):
            for j in range(n):
                post[t, j] = ah[t, j] * bh[t, j]
        for i in range(n):
            g_init[k, i] = f[s, i] * bh[s, i] / c[s]
    return total, post, g_gam, g_init


@njit(cache=True, error_model="numpy")
def viterbi(logf, log_gam, log_init, starts):
    """Most probable state path; ties resolve to the lowest state index."""
    T, n = logf.shape
    path = np.empty(T, dtype=np.int64)
    score = np.empty((T, n))
    back = np.zeros((T, n), dtype=np.int64)
    for k in range(starts.size - 1):
        s, e = starts[k], starts[k + 1]
        for j in range(n):
            score[s, j] = log_init[k, j] + logf[s, j]
        for t in range(s + 1, e):
            for j in range(n):
                best = score[t - 1, 0] + log_gam[t, 0, j]
                arg = 0
                for i in range(1, n):
                    v = score[t - 1, i] + log_gam[t, i, j]
                    if v > best:
                        best = v
                        arg = i
                score[t, j] = best + logf[t, j]
                back[t, j] = arg
        best = score[e - 1, 0]
        arg = 0
        for j in range(1, n):
            if score[e - 1, j] > best:
                best = score[e - 1, j]
                arg = j
        path[e - 1] = arg
        for t in range(e - 1, s, -1):
            path[t - 1] = back[t, path[t]]
    return path
