"""Shared numeric containers, configuration, counters, and tensor file I/O.

Everything downstream (routing, attention, the CLI) moves data through the
types defined here. Attention math itself operates on plain 2-D numpy arrays;
the Tensor wrapper is the validated carrier used at file and CLI boundaries.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np


class MobaError(Exception):
    """Base class for all package errors."""


class FormatError(MobaError):
    """Malformed tensor file header (magic, version, dtype, rank, dims)."""


class LengthError(MobaError):
    """Tensor file payload shorter or longer than the header promises."""


class ShapeError(MobaError):
    """Array shape or dtype violates an operation's precondition."""


class ConfigError(MobaError):
    """Invalid MobaConfig or invalid parameters for a command."""


class PlanValidationError(MobaError):
    """RoutingPlan is internally inconsistent or violates causality."""


_MAGIC = b"TNS1"
_VERSION = 1
_HEADER = struct.Struct("<4sIBBH")  # magic, version, dtype code, rank, reserved
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class Tensor:
    """Rank 1..3 row-major float array (f32 or f64), finite everywhere.

    Rank-3 tensors index [head, position, dim]; batching is done by the
    caller iterating independent calls.
    """

    array: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.array)
        if arr.dtype not in (np.float32, np.float64):
            raise ShapeError(f"unsupported dtype {arr.dtype}, need f32 or f64")
        if not 1 <= arr.ndim <= 3:
            raise ShapeError(f"rank must be 1..3, got {arr.ndim}")
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError("tensor contains NaN/Inf")
        self.array = np.ascontiguousarray(arr)

    @property
    def dims(self) -> list[int]:
        return list(self.array.shape)

    @property
    def dtype(self) -> str:
        return "f32" if self.array.dtype == np.float32 else "f64"

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self.array.reshape(-1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.array.dtype == other.array.dtype
            and self.array.shape == other.array.shape
            and np.array_equal(self.array, other.array)
        )


def tensor_write(t: Tensor, path) -> None:
    """Serialize a tensor to the TNS1 binary format (little-endian).

    Layout: magic "TNS1", version u32, dtype u8 (0=f32, 1=f64), rank u8,
    reserved u16=0, dims as rank x u64, then the row-major payload.
    The write is atomic (temp file + rename).
    """
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t))
    code = _DTYPE_TO_CODE[t.array.dtype]
    header = _HEADER.pack(_MAGIC, _VERSION, code, t.array.ndim, 0)
    dims = np.asarray(t.dims, dtype="<u8").tobytes()
    payload = np.ascontiguousarray(t.array, dtype=_CODE_TO_DTYPE[code]).tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(dims)
            fh.write(payload)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tensor_read(path) -> Tensor:
    """Read a TNS1 file; byte-exact inverse of tensor_write."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise LengthError(f"file is {len(blob)} bytes, shorter than the header")
    magic, version, code, rank, reserved = _HEADER.unpack_from(blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    if not 1 <= rank <= 3:
        raise FormatError(f"rank must be 1..3, got {rank}")
    if reserved != 0:
        raise FormatError(f"reserved field must be 0, got {reserved}")
    dims_end = _HEADER.size + 8 * rank
    if len(blob) < dims_end:
        raise LengthError("file truncated inside the dims table")
    dims = np.frombuffer(blob, dtype="<u8", count=rank, offset=_HEADER.size)
    if any(extent < 1 for extent in dims):
        raise FormatError(f"all extents must be >= 1, got {dims.tolist()}")
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(dims))
    expected = dims_end + count * dtype.itemsize
    if len(blob) != expected:
        raise LengthError(f"payload is {len(blob) - dims_end} bytes, expected {count * dtype.itemsize}")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=dims_end)
    arr = data.reshape(tuple(int(e) for e in dims)).astype(dtype.newbyteorder("="), copy=True)
    try:
        return Tensor(arr)
    except ShapeError as exc:
        raise FormatError(str(exc)) from exc


@dataclass(frozen=True)
class MobaConfig:
    """Block size, top-k, head dim, and tiling knobs for every routing and
    attention call.

    top_k counts the routed past blocks; the query's own block is always
    attended in addition, so index rows carry up to top_k + 1 entries.
    Unset physical tile sizes default to min(64, their logical bound).
    """

    block_size_B: int
    top_k: int
    head_dim_d: int
    logical_q_block_Bq: int = 512
    phys_tile_Br: int | None = None
    phys_tile_Bc: int | None = None
    conv_width: int = 0

    def __post_init__(self):
        if self.block_size_B < 1 or self.top_k < 1 or self.head_dim_d < 1:
            raise ConfigError("block_size_B, top_k, head_dim_d must all be >= 1")
        if self.logical_q_block_Bq < 1:
            raise ConfigError("logical_q_block_Bq must be >= 1")
        if self.phys_tile_Br is None:
            object.__setattr__(self, "phys_tile_Br", min(64, self.logical_q_block_Bq))
        if self.phys_tile_Bc is None:
            object.__setattr__(self, "phys_tile_Bc", min(64, self.block_size_B))
        if not 1 <= self.phys_tile_Bc <= self.block_size_B:
            raise ConfigError(f"phys_tile_Bc={self.phys_tile_Bc} must be in [1, block_size_B]")
        if not 1 <= self.phys_tile_Br <= self.logical_q_block_Bq:
            raise ConfigError(f"phys_tile_Br={self.phys_tile_Br} must be in [1, logical_q_block_Bq]")
        if self.conv_width not in (0, 3, 5):
            raise ConfigError(f"conv_width must be 0, 3, or 5, got {self.conv_width}")

    def n_blocks(self, n_tokens: int) -> int:
        return -(-n_tokens // self.block_size_B)


@dataclass
class OpCounters:
    """Operation counters: the desk-scale stand-in for memory traffic and FLOPs.

    score_flops / attn_flops count multiply-adds; gathered_elems counts
    elements moved through non-contiguous gather/scatter; bulk_elems counts
    elements moved through contiguous loads/stores. Counters only grow within
    a run; one counter object per run context, merged at the end.
    """

    score_flops: int = 0
    attn_flops: int = 0
    gathered_elems: int = 0
    bulk_elems: int = 0

    def reset(self) -> None:
        self.score_flops = 0
        self.attn_flops = 0
        self.gathered_elems = 0
        self.bulk_elems = 0

    def merge(self, other: "OpCounters") -> None:
        self.score_flops += other.score_flops
        self.attn_flops += other.attn_flops
        self.gathered_elems += other.gathered_elems
        self.bulk_elems += other.bulk_elems

    def as_dict(self) -> dict:
        return {
            "score_flops": self.score_flops,
            "attn_flops": self.attn_flops,
            "gathered_elems": self.gathered_elems,
            "bulk_elems": self.bulk_elems,
        }


@dataclass
class RoutingPlan:
    """Query-centric top-k selection plus its key-block-major varlen layout.

    topk_indices is N x (top_k + 1): per query, the selected block ids in
    ascending order, -1 sentinel padding at the end. Every row contains the
    query's own block. counts/offsets/flat_queries are the CSR-style layout:
    block j's attending queries are flat_queries[offsets[j] : offsets[j] +
    counts[j]], ascending.
    """

    topk_indices: np.ndarray
    counts: np.ndarray
    offsets: np.ndarray
    flat_queries: np.ndarray

    @property
    def n_blocks(self) -> int:
        return len(self.counts)

    @property
    def n_queries(self) -> int:
        return self.topk_indices.shape[0]


def validate_plan(plan: RoutingPlan, n_tokens: int, cfg: MobaConfig) -> None:
    """Check RoutingPlan invariants; raise PlanValidationError on violation.

    Verifies shape consistency with (n_tokens, cfg), prefix-sum consistency,
    agreement between the index matrix and the varlen layout, per-slice
    ordering, and causality (no selected block starts after its query).
    """
    B = cfg.block_size_B
    n_blocks = cfg.n_blocks(n_tokens)
    idx = plan.topk_indices
    if idx.ndim != 2 or idx.shape[0] != n_tokens:
        raise PlanValidationError(f"topk_indices shape {idx.shape} does not match N={n_tokens}")
    if plan.counts.shape != (n_blocks,) or plan.offsets.shape != (n_blocks,):
        raise PlanValidationError("counts/offsets length does not match the block count")
    if np.any(plan.counts < 0):
        raise PlanValidationError("negative count")
    expected_offsets = np.concatenate(([0], np.cumsum(plan.counts)[:-1]))
    if not np.array_equal(plan.offsets, expected_offsets):
        raise PlanValidationError("offsets are not the exclusive prefix sum of counts")
    total = int(plan.counts.sum())
    if len(plan.flat_queries) != total:
        raise PlanValidationError("flat_queries length does not match sum(counts)")
    valid = idx >= 0
    if int(valid.sum()) != total:
        raise PlanValidationError("non-sentinel entry count does not match sum(counts)")
    if valid.any():
        entries = idx[valid]
        if entries.max() >= n_blocks:
            raise PlanValidationError("block index out of range")
    rows = np.repeat(np.arange(n_tokens), idx.shape[1]).reshape(idx.shape)
    own = rows // B
    if np.any(valid & (idx > own)):
        raise PlanValidationError("plan selects a block starting after its query (causality)")
    for row in range(n_tokens):
        ids = idx[row][valid[row]]
        if len(np.unique(ids)) != len(ids):
            raise PlanValidationError(f"duplicate block in row {row}")
    for j in range(n_blocks):
        sl = plan.flat_queries[plan.offsets[j] : plan.offsets[j] + plan.counts[j]]
        if len(sl) > 1 and np.any(np.diff(sl) <= 0):
            raise PlanValidationError(f"block {j} slice is not strictly ascending")
        if len(sl) and (sl.min() < j * B or sl.max() >= n_tokens):
            raise PlanValidationError(f"block {j} has an attending query outside [{j * B}, {n_tokens})")


def resolve_threads(requested: int | None = None) -> int:
    """Worker count for internally parallel loops, capped by MOBA_THREADS.

    0 or unset means auto (a small multiple of available cores). Results are
    schedule-independent, so the count only affects speed.
    """
    cap = os.environ.get("MOBA_THREADS", "0")
    try:
        cap_val = int(cap)
    except ValueError:
        cap_val = 0
    if cap_val <= 0:
        cap_val = min(4, os.cpu_count() or 1)
    if requested is None or requested <= 0:
        requested = cap_val
    return max(1, min(requested, cap_val))
