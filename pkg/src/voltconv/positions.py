"""Combinatorial index tables for unique-term Volterra filtering.

All higher-order products of an input vector x of length n can be described
by position tuples.  Restricting to non-decreasing tuples i_1 <= ... <= i_r
keeps exactly one representative per multiset, which is what makes the fast
filtering path cheap.  This module builds the tables that drive it:

* NoIdenticalPositionMatrix  -- strictly increasing tuples (no repeats),
* TotalRepeatingMatrices     -- ordered compositions prescribing how the
                                strictly-increasing tuples are stretched
                                into repeated-index patterns,
* FullPositionMatrix         -- every non-decreasing tuple of one order,
* ProgressiveComputationMatrices -- two-column gather tables that build
                                order-r products from order-(r-1) products
                                and drive the backward scatter.

Everything here is a pre-process: tables are built once per (n, r), frozen
read-only and cached.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass

import numpy as np


class InternalConsistencyError(RuntimeError):
    """A structural invariant of the index tables was violated."""


@dataclass(frozen=True)
class NoIdenticalPositionMatrix:
    """All strictly increasing `order`-tuples over {0..n-1}, one per row."""

    order: int
    n: int
    rows: np.ndarray  # (binomial(n, order), order) int64

    def __post_init__(self):
        self.rows.setflags(write=False)


@dataclass(frozen=True)
class TotalRepeatingMatrices:
    """Ordered compositions of `order`, grouped by ascending length.

    Composition (c_1, ..., c_L) means: take the strictly-increasing tuples
    of length L and repeat their k-th column c_k times, producing one block
    of repeated-index patterns.
    """

    order: int
    parts: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class FullPositionMatrix:
    """All non-decreasing `order`-tuples over {0..n-1}, one per row.

    Row order is the canonical composition-block order of build_fpm and is
    the alignment contract for unique-term weight and term vectors.
    """

    order: int
    n: int
    rows: np.ndarray  # (binomial(n + order - 1, order), order) int64

    def __post_init__(self):
        self.rows.setflags(write=False)


@dataclass(frozen=True)
class PcmVariant:
    """One gather/scatter table: order-r term k is input_pos[k] times the
    order-(r-1) term prev_row[k].

    group_perm / group_starts reorder the term axis so rows sharing the same
    input position are contiguous (ascending position, ascending term index
    within a position); the backward scatter segment-sums along them.
    """

    input_pos: np.ndarray    # (n_terms,) value in [0, n)
    prev_row: np.ndarray     # (n_terms,) row index into the order-(r-1) table
    group_perm: np.ndarray   # (n_terms,) stable argsort of input_pos
    group_starts: np.ndarray  # (n,) segment starts into the permuted axis

    def __post_init__(self):
        for a in (self.input_pos, self.prev_row, self.group_perm, self.group_starts):
            a.setflags(write=False)


@dataclass(frozen=True)
class ProgressiveComputationMatrices:
    """The `order` gather/scatter variants for one order.

    Variant t is obtained by peeling off column t of the full position
    matrix; all variants describe the same terms and any one of them can
    drive the forward product chain, while the backward pass sums over all
    of them.
    """

    order: int
    n: int
    variants: tuple[PcmVariant, ...]


_INT64_MAX = 2**63 - 1


def count_terms(n: int, r: int) -> int:
    """Number of unique order-r products of an n-vector: binomial(n+r-1, r)."""
    _check_positive(n=n, r=r)
    count = math.comb(n + r - 1, r)
    if count > _INT64_MAX:
        raise OverflowError(f"C({n + r - 1},{r}) does not fit a 64-bit index")
    return count


def count_params(n: int, r: int) -> int:
    """Total filter parameters through order r, bias included: binomial(n+r, r)."""
    _check_positive(n=n, r=r)
    count = math.comb(n + r, r)
    if count > _INT64_MAX:
        raise OverflowError(f"C({n + r},{r}) does not fit a 64-bit index")
    return count


def _check_positive(**kwargs):
    for name, value in kwargs.items():
        if int(value) != value or value <= 0:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")


def build_npm(n: int, j: int) -> NoIdenticalPositionMatrix:
    """Build the strictly-increasing j-tuples over {0..n-1}.

    Construction is shift-and-drop: starting from the single positions
    [0..n-1], each extension round appends (last element + shift) for
    shift = 1, 2, ... and drops rows that run past n-1.  The resulting row
    order is deterministic; for j > n the matrix is legitimately empty.
    """
    _check_positive(n=n, j=j)
    rows = np.arange(n, dtype=np.int64).reshape(n, 1)
    for _ in range(j - 1):
        rows = _extend_strict(rows, n)
    if rows.shape[0] != math.comb(n, j):
        raise InternalConsistencyError(
            f"NPM row count {rows.shape[0]} != C({n},{j})"
        )
    return NoIdenticalPositionMatrix(order=j, n=n, rows=rows)


def _extend_strict(rows: np.ndarray, n: int) -> np.ndarray:
    j = rows.shape[1]
    if rows.shape[0] == 0:
        return np.empty((0, j + 1), dtype=np.int64)
    last = rows[:, -1]
    blocks = []
    for shift in range(1, n):
        new_last = last + shift
        keep = new_last <= n - 1
        if not keep.any():
            break  # shifts only grow, nothing later survives
        blocks.append(np.hstack([rows[keep], new_last[keep, None]]))
    if not blocks:
        return np.empty((0, j + 1), dtype=np.int64)
    return np.ascontiguousarray(np.vstack(blocks))


# Compositions of 3 and 4 use a fixed legacy ordering that the repeated-index
# block layout (and therefore every serialized table) depends on; r >= 5 falls
# back to the generic rule: ascending length, lexicographically descending
# within a length group.
_FIXED_COMPOSITIONS = {
    1: ((1,),),
    2: ((2,), (1, 1)),
    3: ((3,), (1, 2), (2, 1), (1, 1, 1)),
    4: ((4,), (1, 3), (3, 1), (2, 2), (2, 1, 1), (1, 2, 1), (1, 1, 2),
        (1, 1, 1, 1)),
}


def build_trm(r: int) -> TotalRepeatingMatrices:
    """All 2^(r-1) ordered compositions of r in the canonical table order."""
    _check_positive(r=r)
    if r in _FIXED_COMPOSITIONS:
        return TotalRepeatingMatrices(order=r, parts=_FIXED_COMPOSITIONS[r])
    parts = []
    for length in range(1, r + 1):
        group = sorted(_compositions(r, length), reverse=True)
        parts.extend(group)
    return TotalRepeatingMatrices(order=r, parts=tuple(parts))


def _compositions(total: int, length: int) -> list[tuple[int, ...]]:
    if length == 1:
        return [(total,)]
    out = []
    for first in range(1, total - length + 2):
        for rest in _compositions(total - first, length - 1):
            out.append((first,) + rest)
    return out


def build_fpm(n: int, r: int) -> FullPositionMatrix:
    """Build every non-decreasing r-tuple over {0..n-1}, one block per
    composition.

    For composition (c_1, ..., c_L) the block is the strictly-increasing
    L-tuples with column k repeated c_k times; stacking the blocks in
    composition order enumerates each multiset exactly once.
    """
    _check_positive(n=n, r=r)
    trm = build_trm(r)
    npm_rows = {}
    rows = np.arange(n, dtype=np.int64).reshape(n, 1)
    npm_rows[1] = rows
    for j in range(2, r + 1):
        rows = _extend_strict(rows, n)
        npm_rows[j] = rows
    blocks = []
    for comp in trm.parts:
        base = npm_rows[len(comp)]
        if base.shape[0] == 0:
            continue
        blocks.append(np.repeat(base, comp, axis=1))
    stacked = np.ascontiguousarray(np.vstack(blocks))
    expected = count_terms(n, r)
    if stacked.shape[0] != expected:
        raise InternalConsistencyError(
            f"FPM row count {stacked.shape[0]} != C({n + r - 1},{r}) = {expected}"
        )
    return FullPositionMatrix(order=r, n=n, rows=stacked)


def _row_keys(rows: np.ndarray, n: int) -> np.ndarray:
    # Positional base-n encoding; row width * log(n) stays far below 63 bits
    # for every supported table size.
    keys = np.zeros(rows.shape[0], dtype=np.int64)
    for col in range(rows.shape[1]):
        keys = keys * n + rows[:, col]
    return keys


def build_pcms(
    fpm_prev: FullPositionMatrix, fpm_cur: FullPositionMatrix
) -> ProgressiveComputationMatrices:
    """Build the gather/scatter variants linking order r-1 to order r.

    Variant t deletes column t of the order-r table, locates each remaining
    (sorted) row in the order-(r-1) table and pairs that row index with the
    deleted position.  Works uniformly for r >= 2; at r = 2 the variants are
    the second-order table itself and its column swap.
    """
    if fpm_prev.n != fpm_cur.n:
        raise ValueError("position tables disagree on input length")
    if fpm_prev.order != fpm_cur.order - 1:
        raise ValueError("need consecutive orders to build gather tables")
    n = fpm_cur.n
    r = fpm_cur.order
    prev_keys = _row_keys(fpm_prev.rows, n)
    order = np.argsort(prev_keys, kind="stable")
    sorted_keys = prev_keys[order]
    variants = []
    for col in range(r):
        deleted = np.ascontiguousarray(fpm_cur.rows[:, col])
        kept = np.sort(np.delete(fpm_cur.rows, col, axis=1), axis=1)
        pos = np.searchsorted(sorted_keys, _row_keys(kept, n))
        if (pos >= len(sorted_keys)).any() or (
            sorted_keys[np.minimum(pos, len(sorted_keys) - 1)]
            != _row_keys(kept, n)
        ).any():
            raise InternalConsistencyError(
                "a reduced row is missing from the lower-order table"
            )
        prev_row = order[pos].astype(np.int64)
        perm = np.argsort(deleted, kind="stable").astype(np.int64)
        counts = np.bincount(deleted, minlength=n)
        if (counts == 0).any():
            raise InternalConsistencyError(
                "every input position must appear in every column"
            )
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        variants.append(
            PcmVariant(
                input_pos=deleted,
                prev_row=prev_row,
                group_perm=perm,
                group_starts=starts,
            )
        )
    return ProgressiveComputationMatrices(order=r, n=n, variants=tuple(variants))


@dataclass(frozen=True)
class IndexTables:
    """All tables for one (n, max order) pair: position matrices for orders
    1..r and gather/scatter variants for orders 2..r."""

    n: int
    order: int
    fpms: tuple[FullPositionMatrix, ...]
    pcms: tuple[ProgressiveComputationMatrices, ...]  # entry j-2 is order j

    def fpm(self, j: int) -> FullPositionMatrix:
        return self.fpms[j - 1]

    def pcm(self, j: int) -> ProgressiveComputationMatrices:
        if j < 2:
            raise ValueError("gather tables start at order 2")
        return self.pcms[j - 2]


_CACHE: dict[tuple[int, int], IndexTables] = {}
_CACHE_LOCK = threading.Lock()


def index_tables(n: int, r: int) -> IndexTables:
    """Build (or fetch cached) index tables for input length n, max order r."""
    _check_positive(n=n, r=r)
    key = (n, r)
    with _CACHE_LOCK:
        hit = _CACHE.get(key)
    if hit is not None:
        return hit
    fpms = [build_fpm(n, j) for j in range(1, r + 1)]
    pcms = [build_pcms(fpms[j - 2], fpms[j - 1]) for j in range(2, r + 1)]
    tables = IndexTables(n=n, order=r, fpms=tuple(fpms), pcms=tuple(pcms))
    with _CACHE_LOCK:
        _CACHE.setdefault(key, tables)
        return _CACHE[key]


def clear_index_cache() -> None:
    """Drop all cached tables.

    Large-n tables run to hundreds of megabytes (n=90 at order 4 is
    about half a gigabyte); long-lived processes that benchmark big
    kernels and then move on to other work call this to give the
    memory back.  Tables already held by callers stay valid.
    """
    with _CACHE_LOCK:
        _CACHE.clear()


def tables_to_json(tables: IndexTables) -> str:
    """Serialize the tables to the documented JSON layout.

    Key order and formatting are fixed so repeated exports of the same
    (n, r) are byte-identical, which differential tests rely on.
    """
    doc = {
        "n": tables.n,
        "order": tables.order,
        "fpm": {
            str(f.order): f.rows.tolist() for f in tables.fpms
        },
        "pcms": {
            str(p.order): [
                {
                    "input_pos": v.input_pos.tolist(),
                    "prev_row": v.prev_row.tolist(),
                }
                for v in p.variants
            ]
            for p in tables.pcms
        },
    }
    return json.dumps(doc, indent=1, sort_keys=False)
