"""Command-line front door.

Subcommands: verify (oracle/property suites), bench (counter sweeps over
sequence lengths), snr (analytic SNR table next to Monte Carlo estimates),
attend (file-based attention runs on TNS1 tensors). Every command prints a
JSON report to stdout. Exit codes: 0 = pass, 1 = check or validation
failure, 2 = usage error. Flags override --config file entries, which
override built-in defaults; the resolved configuration is echoed into the
report. Wall-clock fields (*_seconds) are informational, never gated on.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import __version__
from .attention import moba_attention
from .core import ConfigError, MobaConfig, MobaError, OpCounters, Tensor, tensor_read, tensor_write
from .keyconv import ConvKernel, key_conv_forward
from .report import RunReport, write_json_atomic
from .snr import (
    SignalModel,
    effective_gap,
    expected_diff,
    measure_gap_stats,
    p_fail,
    required_snr,
    simulate_retrieval,
    snr,
    var_diff,
)
from .verification import SUITES


def _parse_sizes(text: str):
    sizes = []
    for item in text.split(","):
        parts = item.lower().split("x")
        if len(parts) != 4:
            raise ConfigError(f"size {item!r} is not NxBxKxD")
        sizes.append(tuple(int(p) for p in parts))
    return sizes


def _parse_int_list(text: str):
    return [int(x) for x in text.split(",")]


def _resolve(defaults: dict, config_path, args: argparse.Namespace) -> dict:
    """flags > config file > defaults; returns the echoed config dict."""
    resolved = dict(defaults)
    if config_path:
        with open(config_path) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        resolved.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            resolved[key] = val
    return resolved


def _emit(report: RunReport) -> int:
    print(report.to_json())
    return 0 if report.passed else 1


def cmd_verify(args) -> int:
    defaults = {
        "suite": "all",
        "seed": 7,
        "sizes": None,
        "inject_corrupt_plan": False,
    }
    resolved = _resolve(defaults, args.config, args)
    sizes = _parse_sizes(resolved["sizes"]) if resolved["sizes"] else None
    names = list(SUITES) if resolved["suite"] == "all" else [resolved["suite"]]
    report = RunReport("verify", {**resolved, "sizes": resolved["sizes"] or "default"})
    all_passed = True
    for name in names:
        kwargs = {"seed": resolved["seed"]}
        if name in ("moba", "backward", "router") and sizes:
            kwargs["sizes"] = sizes
        if name == "moba" and resolved["inject_corrupt_plan"]:
            kwargs["inject_corrupt_plan"] = True
        passed, metrics = SUITES[name](**kwargs)
        all_passed = all_passed and passed
        for key, value in metrics.items():
            report.metrics[f"{name}.{key}"] = value
        report.metrics[f"{name}.passed"] = float(passed)
    report.passed = all_passed
    return _emit(report)


def dense_flops_analytic(N: int, d: int) -> int:
    """Dense-attention multiply-adds: every query against all N keys."""
    return 2 * d * N * N


def cmd_bench(args) -> int:
    defaults = {
        "n": "2048,4096,8192",
        "block": 128,
        "topk": 8,
        "dim": 64,
        "repeats": 3,
        "seed": 17,
    }
    resolved = _resolve(defaults, args.config, args)
    n_list = _parse_int_list(str(resolved["n"]))
    B, k, d = resolved["block"], resolved["topk"], resolved["dim"]
    for N in n_list:
        if N < B:
            raise ConfigError(f"N={N} is smaller than the block size {B}")
    cfg = MobaConfig(block_size_B=B, top_k=k, head_dim_d=d)
    rng = np.random.default_rng(resolved["seed"])
    report = RunReport("bench", {**resolved, "n": n_list})
    ratios, moba_flops, dense_flops, gathered, bulk, score_flops, seconds = ([] for _ in range(7))
    band_ok = True
    for N in n_list:
        Q = rng.standard_normal((N, d))
        K = rng.standard_normal((N, d))
        V = rng.standard_normal((N, d))
        counters = OpCounters()
        times = []
        for rep in range(int(resolved["repeats"])):
            counters.reset()
            t0 = time.perf_counter()
            moba_attention(Q, K, V, cfg, counters)
            times.append(time.perf_counter() - t0)
        dense = dense_flops_analytic(N, d)
        ratio = counters.attn_flops / dense
        ratios.append(ratio)
        moba_flops.append(float(counters.attn_flops))
        dense_flops.append(float(dense))
        gathered.append(float(counters.gathered_elems))
        bulk.append(float(counters.bulk_elems))
        score_flops.append(float(counters.score_flops))
        seconds.append(min(times))
        if N >= 8 * k * B:  # N >> kB: ratio must sit near the k*B/N sparsity target
            band_ok = band_ok and abs(ratio * N / (k * B) - 1.0) <= 0.15
    report.metrics = {
        "n_values": [float(x) for x in n_list],
        "attn_flops_moba": moba_flops,
        "attn_flops_dense": dense_flops,
        "flops_ratio": ratios,
        "score_flops": score_flops,
        "gathered_elems": gathered,
        "bulk_elems": bulk,
        "wall_seconds": seconds,
    }
    report.passed = band_ok
    return _emit(report)


def cmd_snr(args) -> int:
    defaults = {
        "dims": "32,64,128",
        "blocks": "128,256,512",
        "trials": 200000,
        "seed": 1,
        "m": 1,
        "mu_signal": 1.0,
        "mu_cluster": 0.0,
        "mu_noise": 0.0,
        "topk": 1,
        "n_blocks": 2,
        "method": "dots",
    }
    resolved = _resolve(defaults, args.config, args)
    dims = _parse_int_list(str(resolved["dims"]))
    blocks = _parse_int_list(str(resolved["blocks"]))
    trials = int(resolved["trials"])
    k, n = int(resolved["topk"]), int(resolved["n_blocks"])
    report = RunReport("snr", {**resolved, "dims": dims, "blocks": blocks})
    cols = {key: [] for key in (
        "d", "B", "delta_mu_eff", "snr", "p_fail_analytic",
        "expected_diff", "var_diff_analytic")}
    if trials > 0:
        for key in ("fail_rate", "std_err", "agree", "emp_mean_diff", "emp_var_diff"):
            cols[key] = []
    all_agree = True
    cell = 0
    for d in dims:
        for B in blocks:
            model = SignalModel(
                d=d, B=B, n=n, k=k, m=int(resolved["m"]),
                mu_signal=float(resolved["mu_signal"]),
                mu_noise=float(resolved["mu_noise"]),
                mu_cluster=float(resolved["mu_cluster"]),
            )
            s = snr(model)
            cols["d"].append(float(d))
            cols["B"].append(float(B))
            cols["delta_mu_eff"].append(effective_gap(model))
            cols["snr"].append(s)
            cols["p_fail_analytic"].append(p_fail(s))
            cols["expected_diff"].append(expected_diff(model))
            cols["var_diff_analytic"].append(var_diff(model))
            if trials > 0:
                est = simulate_retrieval(model, trials, resolved["seed"] + cell,
                                         method=resolved["method"])
                agree = abs(est.fail_rate - p_fail(s)) <= max(4.0 * est.std_err, 0.01)
                all_agree = all_agree and agree
                mean_d, var_d = measure_gap_stats(model, min(trials, 20000), resolved["seed"] + cell)
                cols["fail_rate"].append(est.fail_rate)
                cols["std_err"].append(est.std_err)
                cols["agree"].append(float(agree))
                cols["emp_mean_diff"].append(mean_d)
                cols["emp_var_diff"].append(var_d)
            cell += 1
    report.metrics = dict(cols)
    report.metrics["trials"] = float(trials)
    threshold = required_snr(k, n)
    if threshold == -np.inf:
        report.metrics["required_snr_always_satisfied"] = 1.0
    else:
        report.metrics["required_snr"] = threshold
    report.passed = all_agree
    return _emit(report)


def cmd_attend(args) -> int:
    defaults = {
        "q": None, "k": None, "v": None, "out": None,
        "block": 128, "topk": 8,
        "conv": 0, "kernel": None,
        "emit_plan": None, "emit_lse": None,
        "bq": 512, "br": None, "bc": None,
    }
    resolved = _resolve(defaults, args.config, args)
    for name in ("q", "k", "v", "out"):
        if not resolved[name]:
            raise ConfigError(f"--{name} is required")
    Qt = tensor_read(resolved["q"])
    Kt = tensor_read(resolved["k"])
    Vt = tensor_read(resolved["v"])
    if not (Qt.dims == Kt.dims == Vt.dims):
        raise ConfigError(f"Q/K/V dims differ: {Qt.dims} {Kt.dims} {Vt.dims}")
    if Qt.array.ndim == 1:
        raise ConfigError("rank-1 tensors cannot carry (position, dim) data")
    conv_w = int(resolved["conv"])
    kernel = None
    if conv_w > 0:
        if not resolved["kernel"]:
            raise ConfigError("conv_width > 0 requires --kernel")
        kt = tensor_read(resolved["kernel"])
        if kt.array.ndim != 2 or kt.array.shape[0] != conv_w:
            raise ConfigError(f"kernel tensor must be {conv_w} x d, got {kt.dims}")
        kernel = ConvKernel(kt.array)
    heads = Qt.array[None] if Qt.array.ndim == 2 else Qt.array
    keys = Kt.array[None] if Kt.array.ndim == 2 else Kt.array
    vals = Vt.array[None] if Vt.array.ndim == 2 else Vt.array
    N, d = heads.shape[1], heads.shape[2]
    cfg = MobaConfig(
        block_size_B=int(resolved["block"]), top_k=int(resolved["topk"]),
        head_dim_d=d, logical_q_block_Bq=int(resolved["bq"]),
        phys_tile_Br=resolved["br"], phys_tile_Bc=resolved["bc"],
        conv_width=conv_w,
    )
    if resolved["emit_plan"] and Qt.array.ndim == 3:
        raise ConfigError("--emit-plan is only supported for single-head (rank-2) inputs")
    counters = OpCounters()
    outputs = np.empty_like(heads)
    lses = np.empty(heads.shape[:2], dtype=heads.dtype)
    plan = None
    t0 = time.perf_counter()
    for h in range(heads.shape[0]):
        K_eff = key_conv_forward(keys[h], kernel) if kernel is not None else keys[h]
        res, plan = moba_attention(heads[h], K_eff, vals[h], cfg, counters)
        outputs[h] = res.output
        lses[h] = res.logsumexp
    elapsed = time.perf_counter() - t0
    out_arr = outputs[0] if Qt.array.ndim == 2 else outputs
    tensor_write(Tensor(out_arr), resolved["out"])
    if resolved["emit_lse"]:
        lse_arr = lses[0] if Qt.array.ndim == 2 else lses
        tensor_write(Tensor(np.ascontiguousarray(lse_arr)), resolved["emit_lse"])
    if resolved["emit_plan"]:
        write_json_atomic(
            {
                "counts": plan.counts.tolist(),
                "offsets": plan.offsets.tolist(),
                "flat_queries": plan.flat_queries.tolist(),
            },
            resolved["emit_plan"],
        )
    report = RunReport("attend", {**resolved, "head_dim": d})
    report.metrics = {
        "n_tokens": float(N),
        "head_dim": float(d),
        "heads": float(heads.shape[0]),
        "wall_seconds": elapsed,
        **{key: float(val) for key, val in counters.as_dict().items()},
    }
    report.passed = True
    return _emit(report)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moba",
        description="Block-sparse attention verification, benchmarking, and SNR analysis.",
    )
    parser.add_argument("--version", action="version", version=f"moba {__version__}")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("verify", help="run oracle/property suites")
    p.add_argument("--suite", choices=["dense", "moba", "backward", "conv", "router", "all"])
    p.add_argument("--seed", type=int)
    p.add_argument("--sizes", help="comma list of NxBxKxD")
    p.add_argument("--inject-corrupt-plan", dest="inject_corrupt_plan",
                   action="store_const", const=True,
                   help="corrupt a routing plan to exercise validation")
    p.add_argument("--config")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="counter sweeps over sequence lengths")
    p.add_argument("--n", help="comma list of sequence lengths")
    p.add_argument("--block", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("snr", help="analytic SNR table with Monte Carlo validation")
    p.add_argument("--dims", help="comma list of head dims")
    p.add_argument("--blocks", help="comma list of block sizes")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--mu-signal", dest="mu_signal", type=float)
    p.add_argument("--mu-cluster", dest="mu_cluster", type=float)
    p.add_argument("--mu-noise", dest="mu_noise", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--n-blocks", dest="n_blocks", type=int)
    p.add_argument("--method", choices=["dots", "keys"])
    p.add_argument("--config")
    p.set_defaults(func=cmd_snr)

    p = sub.add_parser("attend", help="run routed attention on TNS1 tensor files")
    p.add_argument("--q")
    p.add_argument("--k")
    p.add_argument("--v")
    p.add_argument("--out")
    p.add_argument("--block", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--bq", type=int)
    p.add_argument("--br", type=int)
    p.add_argument("--bc", type=int)
    p.add_argument("--conv", type=int)
    p.add_argument("--kernel")
    p.add_argument("--emit-plan", dest="emit_plan")
    p.add_argument("--emit-lse", dest="emit_lse")
    p.add_argument("--config")
    p.set_defaults(func=cmd_attend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MobaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        report = RunReport(args.cmd, {}, metrics={}, passed=False)
        print(report.to_json())
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
