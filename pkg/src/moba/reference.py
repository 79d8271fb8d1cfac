"""Ground-truth attention oracles.

Naive dense causal attention and naive (fully materialized) block-routed
attention. Both build explicit N x N masks and full score matrices, so they
are O(N^2) by design; the tiled engine in attention.py is validated against
them. Routing semantics: scores against block centroids are unscaled dot
products, each query routes to its top_k highest-scoring fully-past blocks
(ties to the lower block index) and always attends its own block with
token-level causal masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, MobaConfig, RoutingPlan, ShapeError


@dataclass
class AttentionOutput:
    """Attention result: N x d output rows plus per-query log-normalizers."""

    output: np.ndarray
    logsumexp: np.ndarray


def _check_qkv(Q, K, V):
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("Q, K, V must be 2-D (N x d)")
    if Q.shape != K.shape or K.shape != V.shape:
        raise ShapeError(f"shape mismatch: Q{Q.shape} K{K.shape} V{V.shape}")


def masked_attention_forward(Q, K, V, allowed) -> AttentionOutput:
    """softmax(Q K^T / sqrt(d)) V restricted to an explicit boolean mask.

    Every row of `allowed` must have at least one True entry.
    """
    d = Q.shape[1]
    S = (Q @ K.T) / np.sqrt(np.asarray(d, dtype=Q.dtype))
    S = np.where(allowed, S, -np.inf)
    m = S.max(axis=1)
    P = np.exp(S - m[:, None])
    l = P.sum(axis=1)
    out = (P @ V) / l[:, None]
    return AttentionOutput(output=out, logsumexp=m + np.log(l))


def masked_attention_backward(Q, K, V, dO, allowed):
    """Gradients of sum(dO * O) for masked attention, via full matrices."""
    d = Q.shape[1]
    scale = 1.0 / np.sqrt(np.asarray(d, dtype=Q.dtype))
    S = (Q @ K.T) * scale
    S = np.where(allowed, S, -np.inf)
    m = S.max(axis=1)
    P = np.exp(S - m[:, None])
    P = P / P.sum(axis=1)[:, None]
    O = P @ V
    dV = P.T @ dO
    dP = dO @ V.T
    D = (dO * O).sum(axis=1)
    dS = P * (dP - D[:, None])
    dQ = (dS @ K) * scale
    dK = (dS.T @ Q) * scale
    return dQ, dK, dV


def _causal_mask(N: int) -> np.ndarray:
    return np.tril(np.ones((N, N), dtype=bool))


def dense_causal_forward(Q, K, V) -> AttentionOutput:
    """Full causal attention: row i is softmax(q_i K[0..i]^T / sqrt(d)) V[0..i]."""
    _check_qkv(Q, K, V)
    return masked_attention_forward(Q, K, V, _causal_mask(Q.shape[0]))


def dense_causal_backward(Q, K, V, dO):
    """Gradients of sum(dO * O) through dense causal attention."""
    _check_qkv(Q, K, V)
    if dO.shape != Q.shape:
        raise ShapeError(f"dO shape {dO.shape} does not match Q {Q.shape}")
    return masked_attention_backward(Q, K, V, dO, _causal_mask(Q.shape[0]))


def block_centroids(K, B: int) -> np.ndarray:
    """Per-block mean of key rows; the last block may be shorter than B."""
    N = K.shape[0]
    n = -(-N // B)
    out = np.empty((n, K.shape[1]), dtype=K.dtype)
    for j in range(n):
        out[j] = K[j * B : min((j + 1) * B, N)].mean(axis=0)
    return out


def select_blocks_naive(Q, K, cfg: MobaConfig) -> np.ndarray:
    """Materialized-score top-k routing: the oracle for the tiled router.

    Returns an N x (top_k + 1) matrix of selected block ids, ascending per
    row, -1 padding. Scores are unscaled q . centroid dot products; only
    fully-past blocks compete for the top_k slots; the own block is always
    included.
    """
    N = Q.shape[0]
    B = cfg.block_size_B
    k = cfg.top_k
    cents = block_centroids(K, B)
    n = cents.shape[0]
    scores = Q @ cents.T
    own = np.arange(N) // B
    past = np.arange(n)[None, :] < own[:, None]
    masked = np.where(past, scores, -np.inf)
    # stable argsort on negated scores: ties resolve to the lower block index
    width = min(k, n - 1)  # at most n-1 past blocks exist
    order = np.argsort(-masked, axis=1, kind="stable")[:, :width]
    n_routed = np.minimum(k, own)
    routed = np.where(np.arange(width)[None, :] < n_routed[:, None], order, n)
    combined = np.full((N, k + 1), n, dtype=np.int64)
    combined[:, 0] = own
    combined[:, 1 : 1 + width] = routed
    combined = np.sort(combined, axis=1)
    return np.where(combined >= n, -1, combined).astype(np.int32)


def plan_from_indices(topk_indices, n_blocks: int) -> RoutingPlan:
    """Assemble the varlen layout from an index matrix (oracle-side path).

    Uses a single lexicographic sort over (block, query) pairs, deliberately
    different machinery from the router's histogram + scatter pipeline.
    """
    idx = np.asarray(topk_indices)
    N, width = idx.shape
    rows = np.repeat(np.arange(N, dtype=np.int64), width)
    cols = idx.reshape(-1)
    keep = cols >= 0
    rows, cols = rows[keep], cols[keep].astype(np.int64)
    order = np.lexsort((rows, cols))
    flat = rows[order].astype(np.int32)
    counts = np.bincount(cols, minlength=n_blocks).astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
    return RoutingPlan(
        topk_indices=idx.astype(np.int32),
        counts=counts,
        offsets=offsets,
        flat_queries=flat,
    )


def token_mask_from_plan(plan: RoutingPlan, N: int, B: int) -> np.ndarray:
    """Expand a routing plan into the token-level N x N attention mask."""
    n = plan.n_blocks
    block_sel = np.zeros((N, n), dtype=bool)
    valid = plan.topk_indices >= 0
    rows = np.repeat(np.arange(N), plan.topk_indices.shape[1]).reshape(plan.topk_indices.shape)
    block_sel[rows[valid], plan.topk_indices[valid]] = True
    key_block = np.arange(N) // B
    allowed = block_sel[:, key_block]
    allowed &= _causal_mask(N)
    return allowed


def plan_attention_forward(Q, K, V, plan: RoutingPlan, cfg: MobaConfig) -> AttentionOutput:
    """Naive attention over a frozen routing plan (no re-selection).

    This is the reference the tiled engine and its gradients are checked
    against when the plan must stay fixed (finite differences).
    """
    _check_qkv(Q, K, V)
    allowed = token_mask_from_plan(plan, Q.shape[0], cfg.block_size_B)
    return masked_attention_forward(Q, K, V, allowed)


def plan_attention_backward(Q, K, V, dO, plan: RoutingPlan, cfg: MobaConfig):
    """Gradients of sum(dO * O) through plan_attention_forward."""
    allowed = token_mask_from_plan(plan, Q.shape[0], cfg.block_size_B)
    return masked_attention_backward(Q, K, V, dO, allowed)


def naive_moba_forward(Q, K, V, cfg: MobaConfig) -> tuple[AttentionOutput, RoutingPlan]:
    """Fully materialized block-routed attention; the forward-path oracle.

    Builds the complete query x block score matrix, selects blocks, expands
    the token mask, and runs masked softmax attention. Returns the plan so
    the optimized path can be compared selection-for-selection.
    """
    _check_qkv(Q, K, V)
    if cfg.top_k < 1:
        raise ConfigError("top_k must be >= 1")
    if Q.shape[1] != cfg.head_dim_d:
        raise ShapeError(f"d={Q.shape[1]} does not match cfg.head_dim_d={cfg.head_dim_d}")
    indices = select_blocks_naive(Q, K, cfg)
    plan = plan_from_indices(indices, cfg.n_blocks(Q.shape[0]))
    out = plan_attention_forward(Q, K, V, plan, cfg)
    return out, plan
