"""Independent oracles shared by the test modules.

Deliberately naive implementations (per-row Python loops, explicit sorts,
finite differences) kept separate from the package code they check.
"""

import numpy as np


def rowwise_dense_oracle(Q, K, V):
    """Per-row causal softmax attention with ascending-sorted summation."""
    N, d = Q.shape
    out = np.zeros_like(Q)
    lse = np.zeros(N, dtype=Q.dtype)
    inv = 1.0 / np.sqrt(d)
    for i in range(N):
        s = np.array([float(Q[i] @ K[j]) * inv for j in range(i + 1)])
        m = s.max()
        e = np.exp(s - m)
        total = 0.0
        acc = np.zeros(d, dtype=Q.dtype)
        for j in np.argsort(e):
            total += e[j]
            acc += e[j] * V[j]
        out[i] = acc / total
        lse[i] = m + np.log(total)
    return out, lse


def selection_oracle(Q, K, B, k):
    """Per-query selection sets via a full materialized sort.

    Scores every fully-past block with an unscaled centroid dot product,
    sorts by (score desc, block asc), keeps the best k, and adds the query's
    own block. Returns a list of sorted lists.
    """
    N = Q.shape[0]
    n = -(-N // B)
    cents = [K[j * B : min((j + 1) * B, N)].mean(axis=0) for j in range(n)]
    sel = []
    for i in range(N):
        b = i // B
        scored = sorted(
            ((float(Q[i] @ cents[j]), j) for j in range(b)),
            key=lambda t: (-t[0], t[1]),
        )
        sel.append(sorted([j for _, j in scored[:k]] + [b]))
    return sel


def moba_row_oracle(Q, K, V, B, k):
    """Brute-force routed attention: per-row softmax over selected tokens."""
    N, d = Q.shape
    sel = selection_oracle(Q, K, B, k)
    out = np.zeros_like(Q)
    lse = np.zeros(N, dtype=Q.dtype)
    inv = 1.0 / np.sqrt(d)
    for i in range(N):
        cols = [
            p
            for j in sel[i]
            for p in range(j * B, min((j + 1) * B, N))
            if p <= i
        ]
        s = np.array([float(Q[i] @ K[p]) * inv for p in cols])
        m = s.max()
        e = np.exp(s - m)
        total = e.sum()
        out[i] = (e[:, None] * V[cols]).sum(axis=0) / total
        lse[i] = m + np.log(total)
    return out, lse, sel


def fd_gradient(loss, arr, h=1e-5):
    """Central finite differences of a scalar loss with respect to arr."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up = loss()
        flat[idx] = orig - h
        down = loss()
        flat[idx] = orig
        gf[idx] = (up - down) / (2.0 * h)
    return g


def grad_rel_err(analytic, numeric):
    scale = max(1.0, float(np.abs(analytic).max()))
    return float(np.abs(analytic - numeric).max()) / scale


def visible_selected_tokens(N, B, k):
    """Closed form: sum over queries of visible tokens in selected blocks."""
    own = np.arange(N) // B
    return int((np.minimum(k, own) * B + np.arange(N) % B + 1).sum())


def plan_rows_as_sets(plan):
    return [set(int(x) for x in row if x >= 0) for row in plan.topk_indices]
