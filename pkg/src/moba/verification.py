"""Self-check suites behind `moba verify`.

Each suite pits the optimized path against an independent reference (per-row
brute force, the materialized oracle, or finite differences) and reports the
worst deviation it saw. The CLI turns the returned (passed, metrics) pairs
into a RunReport.
"""

from __future__ import annotations

import numpy as np

from .attention import moba_attention, moba_backward, moba_forward
from .core import MobaConfig, OpCounters, PlanValidationError
from .keyconv import ConvKernel, key_conv_backward, key_conv_forward, random_kernel
from .reference import (
    dense_causal_backward,
    dense_causal_forward,
    naive_moba_forward,
    plan_attention_forward,
    select_blocks_naive,
)
from .router import build_plan, build_varlen, compute_centroids, select_topk

FWD_TOL = 1e-10
FD_TOL = 1e-5
FD_STEP = 1e-5

DEFAULT_MOBA_SIZES = [
    (64, 16, 1, 8),
    (128, 32, 2, 16),
    (192, 32, 4, 8),
    (256, 64, 2, 32),
    (320, 64, 8, 16),
    (500, 64, 3, 16),  # ragged tail
    (512, 128, 2, 64),
]
DEFAULT_BACKWARD_SIZES = [
    (32, 8, 2, 4),
    (48, 16, 2, 6),
    (64, 16, 3, 8),
]


def _rand_qkv(rng, N, d, dtype=np.float64):
    Q = rng.standard_normal((N, d)).astype(dtype)
    K = rng.standard_normal((N, d)).astype(dtype)
    V = rng.standard_normal((N, d)).astype(dtype)
    return Q, K, V


def _dense_rowwise_oracle(Q, K, V):
    """Per-row brute force with ascending-sorted summation of the exponents."""
    N, d = Q.shape
    out = np.zeros_like(Q)
    inv = 1.0 / np.sqrt(d)
    for i in range(N):
        s = (K[: i + 1] @ Q[i]) * inv
        m = s.max()
        e = np.exp(s - m)
        order = np.argsort(e)
        total = 0.0
        acc = np.zeros(d, dtype=Q.dtype)
        for j in order:
            total += e[j]
            acc += e[j] * V[j]
        out[i] = acc / total
    return out


def fd_gradient(loss, arr, h: float = FD_STEP) -> np.ndarray:
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


def grad_rel_err(analytic, numeric) -> float:
    """Infinity-norm error relative to the analytic scale (floored at 1)."""
    scale = max(1.0, float(np.abs(analytic).max()))
    return float(np.abs(analytic - numeric).max()) / scale


def verify_dense(seed: int = 7, sizes=None) -> tuple[bool, dict]:
    sizes = sizes or [(1, 4), (16, 8), (64, 16), (128, 32)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for N, d in sizes:
        Q, K, V = _rand_qkv(rng, N, d)
        res = dense_causal_forward(Q, K, V)
        ref = _dense_rowwise_oracle(Q, K, V)
        worst = max(worst, float(np.abs(res.output - ref).max()))
    # single visible key: output row 0 is exactly V row 0
    Q, K, V = _rand_qkv(rng, 1, 8)
    first_row_dev = float(np.abs(dense_causal_forward(Q, K, V).output[0] - V[0]).max())
    metrics = {"max_abs_dev": worst, "single_key_dev": first_row_dev}
    return worst <= 1e-11 and first_row_dev == 0.0, metrics


def _corrupt_plan(plan, n_blocks):
    """Point some query's selection at a future block; varlen kept consistent."""
    idx = plan.topk_indices.copy()
    target = n_blocks - 1
    row = 0
    if idx[row, -1] == -1:
        idx[row, -1] = target
    else:
        idx[row, 0] = target
    return build_varlen(idx, n_blocks)


def verify_moba(seed: int = 7, sizes=None, inject_corrupt_plan: bool = False) -> tuple[bool, dict]:
    sizes = sizes or DEFAULT_MOBA_SIZES
    rng = np.random.default_rng(seed)
    worst_out = 0.0
    worst_lse = 0.0
    plans_equal = True
    for N, B, k, d in sizes:
        cfg = MobaConfig(block_size_B=B, top_k=k, head_dim_d=d)
        Q, K, V = _rand_qkv(rng, N, d)
        ref, ref_plan = naive_moba_forward(Q, K, V, cfg)
        res, plan = moba_attention(Q, K, V, cfg, OpCounters())
        worst_out = max(worst_out, float(np.abs(res.output - ref.output).max()))
        worst_lse = max(worst_lse, float(np.abs(res.logsumexp - ref.logsumexp).max()))
        plans_equal = plans_equal and np.array_equal(plan.topk_indices, ref_plan.topk_indices)
    metrics = {
        "max_abs_dev_output": worst_out,
        "max_abs_dev_logsumexp": worst_lse,
        "plans_identical": float(plans_equal),
    }
    passed = worst_out <= FWD_TOL and worst_lse <= FWD_TOL and plans_equal
    if inject_corrupt_plan:
        N, B, k, d = 128, 32, 2, 8
        cfg = MobaConfig(block_size_B=B, top_k=k, head_dim_d=d)
        Q, K, V = _rand_qkv(rng, N, d)
        plan = build_plan(Q, K, cfg)
        bad = _corrupt_plan(plan, cfg.n_blocks(N))
        try:
            moba_forward(Q, K, V, bad, cfg, OpCounters())
        except PlanValidationError as exc:
            raise PlanValidationError(f"injected fault detected: {exc}") from exc
        metrics["fault_detected"] = 0.0
        passed = False  # corruption was not caught
    return passed, metrics


def verify_backward(seed: int = 7, sizes=None) -> tuple[bool, dict]:
    sizes = sizes or DEFAULT_BACKWARD_SIZES
    rng = np.random.default_rng(seed)
    worst = 0.0
    for N, B, k, d in sizes:
        cfg = MobaConfig(block_size_B=B, top_k=k, head_dim_d=d)
        Q, K, V = _rand_qkv(rng, N, d)
        dO = rng.standard_normal((N, d))
        _, plan = naive_moba_forward(Q, K, V, cfg)
        fwd = moba_forward(Q, K, V, plan, cfg, OpCounters())
        dQ, dK, dV = moba_backward(Q, K, V, fwd.output, dO, fwd.logsumexp, plan, cfg, OpCounters())

        def loss():
            return float((plan_attention_forward(Q, K, V, plan, cfg).output * dO).sum())

        for analytic, arr in ((dQ, Q), (dK, K), (dV, V)):
            worst = max(worst, grad_rel_err(analytic, fd_gradient(loss, arr)))
        zq, zk, zv = moba_backward(Q, K, V, fwd.output, np.zeros_like(dO),
                                   fwd.logsumexp, plan, cfg, OpCounters())
        if zq.any() or zk.any() or zv.any():
            return False, {"max_fd_rel_err": worst, "zero_grad_exact": 0.0}
    # dense backward against finite differences
    Q, K, V = _rand_qkv(rng, 8, 4)
    dO = rng.standard_normal((8, 4))
    dQ, dK, dV = dense_causal_backward(Q, K, V, dO)

    def dense_loss():
        return float((dense_causal_forward(Q, K, V).output * dO).sum())

    for analytic, arr in ((dQ, Q), (dK, K), (dV, V)):
        worst = max(worst, grad_rel_err(analytic, fd_gradient(dense_loss, arr)))
    metrics = {"max_fd_rel_err": worst, "zero_grad_exact": 1.0}
    return worst <= FD_TOL, metrics


def verify_conv(seed: int = 7) -> tuple[bool, dict]:
    rng = np.random.default_rng(seed)
    N, d, width = 32, 4, 3
    K = rng.standard_normal((N, d))
    # zero weights: exact identity
    ident_dev = float(np.abs(key_conv_forward(K, ConvKernel(np.zeros((width, d)))) - K).max())
    # hand case: constant keys, single unit lag-0 tap
    hand = key_conv_forward(np.ones((3, 1)), ConvKernel(np.array([[1.0], [0.0], [0.0]])))
    hand_dev = float(np.abs(hand - (1.0 + 1.0 / (1.0 + np.exp(-1.0)))).max())
    # causality: bumping position t never changes outputs before t
    kernel = random_kernel(width, d, seed)
    base = key_conv_forward(K, kernel)
    causal_ok = True
    for t in range(N):
        bumped = K.copy()
        bumped[t] += 0.5
        delta = key_conv_forward(bumped, kernel) - base
        if np.abs(delta[:t]).max(initial=0.0) != 0.0:
            causal_ok = False
    # gradients against finite differences
    worst = 0.0
    for trial in range(3):
        Kt = rng.standard_normal((16, 3))
        kern = random_kernel(width, 3, seed + trial + 1)
        dOut = rng.standard_normal(Kt.shape)
        dK, dW = key_conv_backward(Kt, kern, dOut)

        def loss():
            return float((key_conv_forward(Kt, kern) * dOut).sum())

        worst = max(worst, grad_rel_err(dK, fd_gradient(loss, Kt)))
        worst = max(worst, grad_rel_err(dW, fd_gradient(loss, kern.weights)))
    metrics = {
        "identity_dev": ident_dev,
        "hand_case_dev": hand_dev,
        "causality_ok": float(causal_ok),
        "max_fd_rel_err": worst,
    }
    passed = ident_dev == 0.0 and hand_dev <= 1e-12 and causal_ok and worst <= FD_TOL
    return passed, metrics


def verify_router(seed: int = 7, sizes=None) -> tuple[bool, dict]:
    sizes = sizes or [(64, 16, 2, 8), (256, 32, 3, 8), (250, 32, 4, 16)]
    rng = np.random.default_rng(seed)
    oracle_match = True
    tiling_ok = True
    invariants_ok = True
    for N, B, k, d in sizes:
        Q, K, _ = _rand_qkv(rng, N, d)
        cfg = MobaConfig(block_size_B=B, top_k=k, head_dim_d=d)
        cents = compute_centroids(K, B)
        base = select_topk(Q, cents, cfg)
        oracle_match = oracle_match and np.array_equal(base, select_blocks_naive(Q, K, cfg))
        for br, bc in ((1, 1), (7, 3), (min(64, B), min(64, B))):
            alt_cfg = MobaConfig(block_size_B=B, top_k=k, head_dim_d=d,
                                 phys_tile_Br=br, phys_tile_Bc=bc)
            tiling_ok = tiling_ok and np.array_equal(base, select_topk(Q, cents, alt_cfg))
        plan = build_varlen(base, cents.n_blocks)
        own = np.arange(N) // B
        expected = int((1 + np.minimum(k, own)).sum())
        invariants_ok = invariants_ok and int(plan.counts.sum()) == expected
        invariants_ok = invariants_ok and np.array_equal(
            plan.offsets, np.concatenate(([0], np.cumsum(plan.counts)[:-1])))
        # reverse scan: varlen slices reconstruct each query's selection set
        rebuilt = [set() for _ in range(N)]
        for j in range(plan.n_blocks):
            for q in plan.flat_queries[plan.offsets[j]: plan.offsets[j] + plan.counts[j]]:
                rebuilt[q].add(j)
        for i in range(N):
            want = set(int(x) for x in base[i] if x >= 0)
            if rebuilt[i] != want:
                invariants_ok = False
    metrics = {
        "oracle_match": float(oracle_match),
        "tiling_invariant": float(tiling_ok),
        "plan_invariants": float(invariants_ok),
    }
    return oracle_match and tiling_ok and invariants_ok, metrics


SUITES = {
    "dense": verify_dense,
    "moba": verify_moba,
    "backward": verify_backward,
    "conv": verify_conv,
    "router": verify_router,
}
