"""Three-stage routing pipeline: centroids, tiled top-k, varlen reformatting.

Stage 1 averages each key block into a centroid. Stage 2 streams query-row
tiles against centroid chunks and maintains a per-query sorted candidate
list, so the full query x block score matrix is never materialized (peak
extra storage is O(Br * (Bc + k))). Stage 3 converts the query-centric index
matrix into the key-block-major varlen layout via histogram, prefix sum, and
an ascending scatter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import MobaConfig, OpCounters, PlanValidationError, RoutingPlan, ShapeError


@dataclass
class CentroidMatrix:
    """Block centroids (n x d) plus the token count of each block."""

    centroids: np.ndarray
    block_lengths: np.ndarray

    @property
    def n_blocks(self) -> int:
        return self.centroids.shape[0]


def compute_centroids(K, B: int, counters: OpCounters | None = None) -> CentroidMatrix:
    """Mean-pool each block of B key rows; the last block may be ragged."""
    if K.ndim != 2:
        raise ShapeError("K must be 2-D (N x d)")
    if B < 1:
        raise ShapeError("block size must be >= 1")
    N, d = K.shape
    n = -(-N // B)
    starts = np.arange(n) * B
    lengths = np.minimum(B, N - starts)
    sums = np.add.reduceat(K, starts, axis=0)
    cents = sums / lengths[:, None].astype(K.dtype)
    if counters is not None:
        counters.bulk_elems += N * d + n * d
    return CentroidMatrix(centroids=cents, block_lengths=lengths.astype(np.int64))


def select_topk(Q, centroids: CentroidMatrix, cfg: MobaConfig,
                counters: OpCounters | None = None) -> np.ndarray:
    """Tiled top-k block selection without materializing the score matrix.

    Processes Br-row query tiles against Bc-row centroid chunks. Each query
    carries a (top_k + 1)-slot list sorted by descending score; the own block
    is pinned first with a +inf internal sentinel, and every strictly-earlier
    candidate is inserted by rank (O(k) per candidate, ties to the lower
    block index). Returns the N x (top_k + 1) index matrix, rows ascending,
    -1 padding. Output is identical for any (Br, Bc) tiling.
    """
    if Q.ndim != 2:
        raise ShapeError("Q must be 2-D (N x d)")
    N, d = Q.shape
    cents = centroids.centroids
    n = cents.shape[0]
    k = cfg.top_k
    Br = cfg.phys_tile_Br
    Bc = cfg.phys_tile_Bc
    width = k + 1
    out = np.empty((N, width), dtype=np.int32)
    slots = np.arange(width)

    for r0 in range(0, N, Br):
        r1 = min(r0 + Br, N)
        rows = np.arange(r0, r1)
        own = rows // cfg.block_size_B
        m = r1 - r0
        top_scores = np.full((m, width), -np.inf)
        top_idx = np.full((m, width), -1, dtype=np.int64)
        top_scores[:, 0] = np.inf  # forced own block, never exposed
        top_idx[:, 0] = own
        Qt = Q[r0:r1]
        last_past = int(own.max())  # centroid chunks beyond this are invisible
        for c0 in range(0, min(n, last_past), Bc):
            c1 = min(c0 + Bc, n, last_past)
            chunk_scores = np.asarray(Qt @ cents[c0:c1].T, dtype=np.float64)
            if counters is not None:
                counters.score_flops += m * (c1 - c0) * d
                counters.bulk_elems += (c1 - c0) * d
            for c in range(c1 - c0):
                j = c0 + c
                cand = chunk_scores[:, c]
                visible = j < own
                if not visible.any():
                    continue
                beaten_by = (top_scores > cand[:, None]) | (
                    (top_scores == cand[:, None]) & (top_idx < j)
                )
                rank = beaten_by.sum(axis=1)
                insert = visible & (rank < width)
                if not insert.any():
                    continue
                shifted_s = np.empty_like(top_scores)
                shifted_s[:, 1:] = top_scores[:, :-1]
                shifted_s[:, 0] = top_scores[:, 0]
                shifted_i = np.empty_like(top_idx)
                shifted_i[:, 1:] = top_idx[:, :-1]
                shifted_i[:, 0] = top_idx[:, 0]
                rank_col = rank[:, None]
                new_s = np.where(slots < rank_col, top_scores,
                                 np.where(slots == rank_col, cand[:, None], shifted_s))
                new_i = np.where(slots < rank_col, top_idx,
                                 np.where(slots == rank_col, j, shifted_i))
                ins_col = insert[:, None]
                top_scores = np.where(ins_col, new_s, top_scores)
                top_idx = np.where(ins_col, new_i, top_idx)
        # canonical row form: ascending block ids, sentinels last
        filled = np.where(top_idx < 0, n, top_idx)
        filled = np.sort(filled, axis=1)
        out[r0:r1] = np.where(filled >= n, -1, filled).astype(np.int32)
    return out


def build_varlen(topk_indices, n_blocks: int) -> RoutingPlan:
    """Reformat query-centric indices into the key-block-major varlen layout.

    Stage 1 histograms selections per block and takes the exclusive prefix
    sum; stage 2 scatters query ids through per-block cursors. Queries are
    scattered in ascending order, so each block's slice comes out sorted
    without the post-hoc sort a nondeterministic scatter would need.
    """
    idx = np.asarray(topk_indices)
    if idx.ndim != 2:
        raise ShapeError("topk_indices must be 2-D")
    if idx.size and (idx.min() < -1 or idx.max() >= n_blocks):
        raise PlanValidationError(
            f"index entries must lie in [-1, {n_blocks}), got "
            f"[{int(idx.min())}, {int(idx.max())}]"
        )
    valid = idx >= 0
    entries = idx[valid]
    counts = np.bincount(entries, minlength=n_blocks).astype(np.int64)
    offsets = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
    flat = np.empty(int(counts.sum()), dtype=np.int32)
    cursor = offsets.copy()
    for i in range(idx.shape[0]):
        blocks = idx[i][valid[i]]
        flat[cursor[blocks]] = i
        cursor[blocks] += 1
    return RoutingPlan(
        topk_indices=idx.astype(np.int32),
        counts=counts,
        offsets=offsets,
        flat_queries=flat,
    )


def build_plan(Q, K, cfg: MobaConfig, counters: OpCounters | None = None) -> RoutingPlan:
    """Full pipeline: centroids -> tiled top-k -> varlen layout."""
    cents = compute_centroids(K, cfg.block_size_B, counters)
    indices = select_topk(Q, cents, cfg, counters)
    return build_varlen(indices, cents.n_blocks)
