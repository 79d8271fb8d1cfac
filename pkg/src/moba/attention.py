"""Tiled gather-and-densify attention engine with instrumented data movement.

The forward pass walks logical query blocks in the outer loop and key blocks
inside, gathers each key block's attending queries into dense row tiles,
streams physical key/value tiles through a running-max softmax state, and
scatters partial state back. The backward pass recomputes attention
probabilities from the saved logsumexp, parallelizes over key blocks, and
accumulates query gradients in an f64 buffer regardless of input dtype.

Counter semantics: attn_flops grows by 2*d per visible (query, key) pair
(QK^T plus PV) in the forward pass and 5*d per visible pair in the backward
pass (score recompute plus four gradient products); gathered_elems counts
elements moved through non-contiguous index tiles, bulk_elems counts
contiguous tile traffic. A gather whose index tile is a contiguous run is
bulk traffic.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    MobaConfig,
    OpCounters,
    PlanValidationError,
    RoutingPlan,
    ShapeError,
    resolve_threads,
    validate_plan,
)
from .reference import AttentionOutput, _check_qkv
from .router import build_plan


@dataclass
class SoftmaxState:
    """Streaming softmax accumulators for a set of query rows.

    partial is kept unnormalized and scaled by exp(-running_max), with the
    (running_max, running_sum) pair alongside; finalize() divides out the
    running sum and recovers the logsumexp. Feeding score/value tiles in any
    order yields the same finalized result up to roundoff.
    """

    running_max: np.ndarray
    running_sum: np.ndarray
    partial: np.ndarray

    @classmethod
    def zeros(cls, n_rows: int, d: int, dtype=np.float64) -> "SoftmaxState":
        return cls(
            running_max=np.full(n_rows, -np.inf, dtype=dtype),
            running_sum=np.zeros(n_rows, dtype=dtype),
            partial=np.zeros((n_rows, d), dtype=dtype),
        )

    def update(self, scores, values) -> None:
        """Fold one tile of masked scores (-inf = masked) and its values in."""
        m_new = np.maximum(self.running_max, scores.max(axis=1))
        m_safe = np.where(np.isneginf(m_new), 0.0, m_new)
        p = np.exp(scores - m_safe[:, None])
        alpha = np.exp(self.running_max - m_safe)
        self.running_sum = self.running_sum * alpha + p.sum(axis=1)
        self.partial = self.partial * alpha[:, None] + p @ values
        self.running_max = m_new

    def finalize(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (output rows, logsumexp). Requires >= 1 key seen per row."""
        out = self.partial / self.running_sum[:, None]
        lse = self.running_max + np.log(self.running_sum)
        return out, lse


def _move(counters: OpCounters | None, rows: np.ndarray, elems_per_row: int) -> None:
    """Count an index-tile transfer: contiguous runs are bulk, else gathered."""
    if counters is None:
        return
    n = len(rows)
    contiguous = n == 1 or int(rows[-1]) - int(rows[0]) + 1 == n
    if contiguous:
        counters.bulk_elems += n * elems_per_row
    else:
        counters.gathered_elems += n * elems_per_row


def _attending_in_range(plan: RoutingPlan, j: int, q0: int, q1: int) -> np.ndarray:
    sl = plan.flat_queries[plan.offsets[j] : plan.offsets[j] + plan.counts[j]]
    lo = np.searchsorted(sl, q0, side="left")
    hi = np.searchsorted(sl, q1, side="left")
    return sl[lo:hi]


def _forward_qblock(Q_scaled, K, V, plan, cfg, q0, q1, counters):
    """Process one logical query block; returns (rows, out, lse) for it."""
    N, d = Q_scaled.shape
    B = cfg.block_size_B
    Br, Bc = cfg.phys_tile_Br, cfg.phys_tile_Bc
    dtype = Q_scaled.dtype
    n_rows = q1 - q0
    state = SoftmaxState.zeros(n_rows, d, dtype=dtype)
    for j in range(plan.n_blocks):
        attending = _attending_in_range(plan, j, q0, q1)
        if len(attending) == 0:
            continue  # empty tile, zero counter cost
        kb0 = j * B
        kb1 = min(kb0 + B, N)
        for r0 in range(0, len(attending), Br):
            rows = attending[r0 : r0 + Br]
            local = rows - q0
            Qg = Q_scaled[rows]
            _move(counters, rows, d)  # gather queries
            _move(counters, rows, d + 2)  # gather partial state (m, l, acc)
            mg = state.running_max[local]
            lg = state.running_sum[local]
            accg = state.partial[local]
            tile = SoftmaxState(running_max=mg, running_sum=lg, partial=accg)
            for c0 in range(kb0, kb1, Bc):
                c1 = min(c0 + Bc, kb1)
                Kt = K[c0:c1]
                Vt = V[c0:c1]
                if counters is not None:
                    counters.bulk_elems += 2 * (c1 - c0) * d
                S = Qg @ Kt.T
                key_pos = np.arange(c0, c1)
                future = key_pos[None, :] > rows[:, None]
                if future.any():
                    S = np.where(future, -np.inf, S)
                    visible = S.size - int(future.sum())
                else:
                    visible = S.size
                if counters is not None:
                    counters.attn_flops += 2 * d * visible
                tile.update(S, Vt)
            state.running_max[local] = tile.running_max
            state.running_sum[local] = tile.running_sum
            state.partial[local] = tile.partial
            _move(counters, rows, d + 2)  # scatter partial state back
    out, lse = state.finalize()
    if counters is not None:
        counters.bulk_elems += n_rows * (d + 1)  # final O and L writes
    return out, lse


def moba_forward(Q, K, V, plan: RoutingPlan, cfg: MobaConfig,
                 counters: OpCounters | None = None,
                 threads: int | None = 1) -> AttentionOutput:
    """Plan-driven tiled attention forward pass.

    Equivalent to the naive oracle on the same plan. Logical query blocks are
    independent, so they may run on a thread pool; per-block counters are
    merged in block order, keeping all results schedule-independent.
    """
    _check_qkv(Q, K, V)
    N, d = Q.shape
    validate_plan(plan, N, cfg)
    scale = np.asarray(1.0 / np.sqrt(d), dtype=Q.dtype)
    Q_scaled = Q * scale
    out = np.empty_like(Q)
    lse = np.empty(N, dtype=Q.dtype)
    q_starts = list(range(0, N, cfg.logical_q_block_Bq))
    workers = resolve_threads(threads)

    def run_block(q0):
        q1 = min(q0 + cfg.logical_q_block_Bq, N)
        local_counters = OpCounters() if counters is not None else None
        o, l = _forward_qblock(Q_scaled, K, V, plan, cfg, q0, q1, local_counters)
        return q0, q1, o, l, local_counters

    if workers > 1 and len(q_starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_block, q_starts))
    else:
        results = [run_block(q0) for q0 in q_starts]
    for q0, q1, o, l, local_counters in results:
        out[q0:q1] = o
        lse[q0:q1] = l
        if counters is not None:
            counters.merge(local_counters)
    return AttentionOutput(output=out, logsumexp=lse)


@dataclass
class BackwardWorkspace:
    """Backward-pass buffers: rowsum(dO*O), f64 dQ accumulator, dK/dV outputs."""

    delta_D: np.ndarray
    dQ_accum: np.ndarray
    dK: np.ndarray
    dV: np.ndarray


def _backward_key_block(Q_scaled, K, V, dO, lse, delta_D, plan, cfg, j, dQ_buf,
                        dK, dV, counters):
    """Accumulate one key block's gradient contributions."""
    N, d = Q_scaled.shape
    B = cfg.block_size_B
    Br, Bc = cfg.phys_tile_Br, cfg.phys_tile_Bc
    kb0 = j * B
    kb1 = min(kb0 + B, N)
    attending = plan.flat_queries[plan.offsets[j] : plan.offsets[j] + plan.counts[j]]
    if len(attending) == 0:
        return
    if counters is not None:
        counters.bulk_elems += 2 * (kb1 - kb0) * d  # K_j, V_j loads
    for r0 in range(0, len(attending), Br):
        rows = attending[r0 : r0 + Br]
        Qg = Q_scaled[rows]
        dOg = dO[rows]
        Lg = lse[rows]
        Dg = delta_D[rows]
        _move(counters, rows, 2 * d + 2)  # gather Q, dO, L, D
        for c0 in range(kb0, kb1, Bc):
            c1 = min(c0 + Bc, kb1)
            Kt = K[c0:c1]
            Vt = V[c0:c1]
            S = Qg @ Kt.T
            key_pos = np.arange(c0, c1)
            future = key_pos[None, :] > rows[:, None]
            if future.any():
                S = np.where(future, -np.inf, S)
                visible = S.size - int(future.sum())
            else:
                visible = S.size
            if counters is not None:
                counters.attn_flops += 5 * d * visible
            P = np.exp(S - Lg[:, None])  # masked entries: exp(-inf) = 0
            dV[c0:c1] += P.T @ dOg
            dP = dOg @ Vt.T
            dS = P * (dP - Dg[:, None])
            dK[c0:c1] += dS.T @ Qg
            dQ_buf[rows] += dS @ Kt
    if counters is not None:
        counters.bulk_elems += 2 * (kb1 - kb0) * d  # dK_j, dV_j writes


def moba_backward(Q, K, V, O, dO, lse, plan: RoutingPlan, cfg: MobaConfig,
                  counters: OpCounters | None = None,
                  schedule: str = "deterministic"):
    """Plan-driven backward pass with score recomputation.

    Phase 1 computes delta_D = rowsum(dO * O). Phase 2 walks key blocks,
    gathers each block's attending queries, recomputes P = exp(S - L),
    and accumulates dV, dK, and the shared f64 dQ buffer. Phase 3 converts
    the accumulator to the output dtype. The deterministic schedule reduces
    key blocks sequentially per query; the parallel schedule merges
    per-thread buffers in completion order (rounding may vary).
    """
    _check_qkv(Q, K, V)
    N, d = Q.shape
    if O.shape != Q.shape or dO.shape != Q.shape:
        raise ShapeError("O and dO must match Q's shape")
    lse = np.asarray(lse)
    if lse.shape != (N,):
        raise PlanValidationError(f"logsumexp has shape {lse.shape}, expected ({N},)")
    if not np.all(np.isfinite(lse)):
        raise PlanValidationError("logsumexp contains non-finite entries")
    validate_plan(plan, N, cfg)
    if schedule not in ("deterministic", "parallel"):
        raise ValueError(f"unknown schedule {schedule!r}")

    scale = np.asarray(1.0 / np.sqrt(d), dtype=Q.dtype)
    Q_scaled = Q * scale
    delta_D = (dO * O).sum(axis=1)
    if counters is not None:
        counters.bulk_elems += 2 * N * d + N  # dO, O reads and D write
    ws = BackwardWorkspace(
        delta_D=delta_D,
        dQ_accum=np.zeros((N, d), dtype=np.float64),
        dK=np.zeros_like(K),
        dV=np.zeros_like(V),
    )

    if schedule == "parallel":
        workers = resolve_threads(None)
    else:
        workers = 1

    if workers > 1 and plan.n_blocks > 1:
        def run(j):
            local = OpCounters() if counters is not None else None
            buf = np.zeros((N, d), dtype=np.float64)
            _backward_key_block(Q_scaled, K, V, dO, lse, delta_D, plan, cfg, j,
                                buf, ws.dK, ws.dV, local)
            return buf, local

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for buf, local in pool.map(run, range(plan.n_blocks)):
                ws.dQ_accum += buf
                if counters is not None:
                    counters.merge(local)
    else:
        for j in range(plan.n_blocks):
            _backward_key_block(Q_scaled, K, V, dO, lse, delta_D, plan, cfg, j,
                                ws.dQ_accum, ws.dK, ws.dV, counters)

    dQ = (ws.dQ_accum * float(scale)).astype(Q.dtype)
    if counters is not None:
        counters.bulk_elems += N * d  # dQ finalization write
    return dQ, ws.dK, ws.dV


def moba_attention(Q, K, V, cfg: MobaConfig,
                   counters: OpCounters | None = None,
                   threads: int | None = 1) -> tuple[AttentionOutput, RoutingPlan]:
    """End-to-end routed attention: centroids, tiled top-k, varlen, forward."""
    _check_qkv(Q, K, V)
    if Q.shape[1] != cfg.head_dim_d:
        raise ShapeError(f"d={Q.shape[1]} does not match cfg.head_dim_d={cfg.head_dim_d}")
    plan = build_plan(Q, K, cfg, counters)
    out = moba_forward(Q, K, V, plan, cfg, counters, threads=threads)
    return out, plan
