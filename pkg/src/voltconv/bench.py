"""Speed and space benchmarks for the dense and unique-term paths.

Speed methodology: input spatial size equals the kernel, so every image
contributes exactly one patch, and both implementations evaluate the same
function on identical random data. The dense reference shares one weight
tensor per order across output channels to keep memory at desk scale,
but every per-channel dot product and gradient contraction is still
executed separately, so the timed arithmetic matches what per-channel
weights would cost. Medians of repeated wall-clock runs are reported,
never means.

Space methodology: the reported bytes are the actual nbytes of the
top-order term buffer each path allocates for one patch, not process
RSS.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dense import (
    DEFAULT_ELEMENT_BUDGET,
    ResourceLimitError,
    embed_unique_weights,
    folded_weights,
    kron_terms,
)
from .geometry import ConvGeometry, im2col
from .positions import count_terms, index_tables
from .unique import (
    build_terms_progressive,
    conv2d_backward,
    conv2d_forward,
    init_volterra_layer,
)

SPEED_COLUMNS = ("impl", "phase", "order", "n", "batch", "channels",
                 "median_ns", "theory_ops", "threads", "status")
SPACE_COLUMNS = ("order", "n", "evc_bytes", "tvc_bytes", "evc_count",
                 "tvc_count", "ratio", "status")

SKIPPED = "skipped-resource-limit"


@dataclass(frozen=True)
class BenchConfig:
    orders: tuple[int, ...]
    kernel_sizes: tuple[tuple[int, int], ...]
    channels: int
    batch: int
    repetitions: int = 5
    warmup: int = 1
    output_path: str | None = None
    out_channels: int | None = None
    threads: int = 1
    seed: int = 0
    element_budget: int = DEFAULT_ELEMENT_BUDGET

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValueError("repetitions must be >= 3 (median reported)")
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.orders or any(r < 1 for r in self.orders):
            raise ValueError("orders must be a nonempty list of r >= 1")
        if not self.kernel_sizes or any(
                kh < 1 or kw < 1 for kh, kw in self.kernel_sizes):
            raise ValueError("kernel sizes must be positive pairs")
        if self.channels < 1 or self.batch < 1:
            raise ValueError("channels and batch must be >= 1")
        if self.out_channels is not None and self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")

    @property
    def resolved_out_channels(self) -> int:
        return self.channels if self.out_channels is None \
            else self.out_channels


def default_speed_config(**overrides) -> BenchConfig:
    """Batch, input channels, and output channels all 10; 3x3 kernel."""
    base = dict(orders=(1, 2, 3, 4), kernel_sizes=((3, 3),), channels=10,
                batch=10, repetitions=5, warmup=1)
    base.update(overrides)
    return BenchConfig(**base)


def default_space_config(**overrides) -> BenchConfig:
    """Single channel, 5x5 kernel: n = 25 across orders 1..4."""
    base = dict(orders=(1, 2, 3, 4), kernel_sizes=((5, 5),), channels=1,
                batch=1, repetitions=3, warmup=1)
    base.update(overrides)
    return BenchConfig(**base)


def _median_ns(fn, cfg: BenchConfig) -> int:
    for _ in range(cfg.warmup):
        fn()
    samples = []
    for _ in range(cfg.repetitions):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(np.median(samples))


class DenseWorkload:
    """Batched dense path with one shared weight bundle.

    Patch rows are processed in chunks sized so the per-chunk Kronecker
    term storage stays within the element budget; order 1 therefore runs
    as a single matrix product, while high orders fall back to small
    chunks. Every output channel repeats its own dot products against
    the shared tensors.
    """

    def __init__(self, patches: np.ndarray, dense_kernel, out_channels: int,
                 element_budget: int = DEFAULT_ELEMENT_BUDGET):
        self.patches = patches
        self.out_channels = out_channels
        self.order = dense_kernel.order
        self.n = dense_kernel.n
        self.flat_w = tuple(w.reshape(-1) for w in dense_kernel.weights)
        self.bias = dense_kernel.bias
        self.folds = folded_weights(dense_kernel)
        per_row = sum(self.n ** j for j in range(1, self.order + 1))
        if self.n ** self.order > element_budget:
            raise ResourceLimitError(
                f"n^r = {self.n}^{self.order} exceeds the element budget "
                f"{element_budget}"
            )
        self.chunk = max(1, element_budget // per_row)

    def _terms(self, rows: np.ndarray) -> list[np.ndarray]:
        """[ones, x, x(x)x, ...]: entry j is the order-j Kronecker power
        of every row."""
        out = [np.ones((rows.shape[0], 1)), rows]
        for _ in range(2, self.order + 1):
            prev = out[-1]
            nxt = (prev[:, :, None] * rows[:, None, :])
            out.append(nxt.reshape(rows.shape[0], -1))
        return out

    def forward(self) -> np.ndarray:
        rows = self.patches.shape[0]
        out = np.empty((rows, self.out_channels))
        for start in range(0, rows, self.chunk):
            sl = slice(start, start + self.chunk)
            terms = self._terms(self.patches[sl])
            for oc in range(self.out_channels):
                acc = np.full(terms[1].shape[0], self.bias)
                for j in range(1, self.order + 1):
                    acc += terms[j] @ self.flat_w[j - 1]
                out[sl, oc] = acc
        return out

    def backward(self, upstream: np.ndarray):
        """Input gradient plus shared-buffer weight gradients for
        upstream of shape (rows, out_channels)."""
        rows = self.patches.shape[0]
        grad_in = np.zeros((rows, self.n))
        grad_w = [np.zeros_like(w) for w in self.flat_w]
        grad_b = 0.0
        for start in range(0, rows, self.chunk):
            sl = slice(start, start + self.chunk)
            terms = self._terms(self.patches[sl])
            for oc in range(self.out_channels):
                u = upstream[sl, oc]
                field = np.zeros((terms[1].shape[0], self.n))
                for j in range(1, self.order + 1):
                    field += terms[j - 1] @ self.folds[j - 1].T
                grad_in[sl] += u[:, None] * field
                for j in range(1, self.order + 1):
                    grad_w[j - 1] += u @ terms[j]
                grad_b += float(u.sum())
        return grad_in, grad_w, grad_b


def _bench_geometry(channels: int, kh: int, kw: int) -> ConvGeometry:
    return ConvGeometry(kernel_h=kh, kernel_w=kw, stride_h=1, stride_w=1,
                        pad_h=0, pad_w=0, in_channels=channels, in_h=kh,
                        in_w=kw)


def _theory_ops(n: int, order: int) -> tuple[int, int]:
    evc = sum(count_terms(n, j) for j in range(1, order + 1))
    tvc = sum(n ** j for j in range(1, order + 1))
    return evc, tvc


def _split_batches(x: np.ndarray, threads: int) -> list[np.ndarray]:
    pieces = np.array_split(x, min(threads, x.shape[0]))
    return [p for p in pieces if p.shape[0]]


def _speed_case_rows(cfg: BenchConfig, order: int, kh: int,
                     kw: int) -> list[dict]:
    n = cfg.channels * kh * kw
    oc = cfg.resolved_out_channels
    evc_ops, tvc_ops = _theory_ops(n, order)
    geom = _bench_geometry(cfg.channels, kh, kw)
    rng = np.random.default_rng((cfg.seed, order, kh, kw))
    x = rng.uniform(-1.0, 1.0, size=(cfg.batch, cfg.channels, kh, kw))

    def row(impl, phase, median_ns, ops, status="ok"):
        return {"impl": impl, "phase": phase, "order": order, "n": n,
                "batch": cfg.batch, "channels": cfg.channels,
                "median_ns": median_ns, "theory_ops": ops,
                "threads": cfg.threads, "status": status}

    rows = []
    layer = init_volterra_layer(geom, out_channels=oc, order=order, rng=rng)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        # unique-term path
        try:
            pieces = _split_batches(x, cfg.threads)
            if pool is None:
                def evc_fwd():
                    return [conv2d_forward(x, layer, cfg.element_budget)]
            else:
                def evc_fwd():
                    return list(pool.map(
                        lambda p: conv2d_forward(p, layer,
                                                 cfg.element_budget),
                        pieces, chunksize=1,
                    ))
            saved_list = [s for _, s in evc_fwd()]
            ups = [np.ones((s.batch, oc, geom.out_h, geom.out_w))
                   for s in saved_list]

            if pool is None:
                def evc_bwd():
                    return conv2d_backward(ups[0], saved_list[0], layer)
            else:
                def evc_bwd():
                    return list(pool.map(
                        lambda pair: conv2d_backward(pair[0], pair[1],
                                                     layer),
                        list(zip(ups, saved_list)), chunksize=1,
                    ))
            rows.append(row("evc", "forward", _median_ns(evc_fwd, cfg),
                            evc_ops))
            rows.append(row("evc", "backward", _median_ns(evc_bwd, cfg),
                            evc_ops))
        except ResourceLimitError:
            rows.append(row("evc", "forward", "", evc_ops, SKIPPED))
            rows.append(row("evc", "backward", "", evc_ops, SKIPPED))

        # dense path over the same data and (embedded) weights
        try:
            patches = im2col(x, geom).data
            tables = layer.tables
            fpms = [tables.fpm(j) for j in range(1, order + 1)]
            dense_kernel = embed_unique_weights(layer.kernel(0), fpms)
            work_pieces = []
            up = np.ones((cfg.batch, oc))
            up_pieces = []
            offset = 0
            for piece in _split_batches(x, cfg.threads):
                rows_here = piece.shape[0]  # one patch per image
                work_pieces.append(DenseWorkload(
                    patches[offset:offset + rows_here], dense_kernel, oc,
                    cfg.element_budget,
                ))
                up_pieces.append(up[offset:offset + rows_here])
                offset += rows_here

            if pool is None:
                work = work_pieces[0]

                def tvc_fwd():
                    return work.forward()

                def tvc_bwd():
                    return work.backward(up)
            else:
                def tvc_fwd():
                    return list(pool.map(lambda w: w.forward(),
                                         work_pieces, chunksize=1))

                def tvc_bwd():
                    return list(pool.map(
                        lambda pair: pair[0].backward(pair[1]),
                        list(zip(work_pieces, up_pieces)), chunksize=1,
                    ))
            rows.append(row("tvc", "forward", _median_ns(tvc_fwd, cfg),
                            tvc_ops))
            rows.append(row("tvc", "backward", _median_ns(tvc_bwd, cfg),
                            tvc_ops))
        except ResourceLimitError:
            rows.append(row("tvc", "forward", "", tvc_ops, SKIPPED))
            rows.append(row("tvc", "backward", "", tvc_ops, SKIPPED))
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    order_key = {"evc": 0, "tvc": 1}
    rows.sort(key=lambda r: (order_key[r["impl"]], r["phase"] != "forward"))
    return rows


def bench_speed(cfg: BenchConfig) -> list[dict]:
    rows = []
    for order in cfg.orders:
        for kh, kw in cfg.kernel_sizes:
            rows.extend(_speed_case_rows(cfg, order, kh, kw))
    if cfg.output_path is not None:
        write_csv(rows, SPEED_COLUMNS, cfg.output_path)
    return rows


def bench_space(cfg: BenchConfig) -> list[dict]:
    """One row per (order, kernel): top-order term buffer sizes, exact
    counts, and the unique/dense count ratio."""
    rows = []
    for order in cfg.orders:
        for kh, kw in cfg.kernel_sizes:
            n = cfg.channels * kh * kw
            rng = np.random.default_rng((cfg.seed, order, kh, kw))
            x = rng.uniform(-1.0, 1.0, size=n)
            evc_count = count_terms(n, order)
            tvc_count = n ** order
            if evc_count > cfg.element_budget:
                evc_bytes = tvc_bytes = ""
                status = SKIPPED
            else:
                tables = index_tables(n, order)
                evc_bytes = build_terms_progressive(
                    x, tables).vectors[order - 1].nbytes
                try:
                    tvc_bytes = kron_terms(
                        x, order,
                        cfg.element_budget).vectors[order - 1].nbytes
                    status = "ok"
                except ResourceLimitError:
                    tvc_bytes = ""
                    status = SKIPPED
            rows.append({
                "order": order, "n": n, "evc_bytes": evc_bytes,
                "tvc_bytes": tvc_bytes, "evc_count": evc_count,
                "tvc_count": tvc_count,
                "ratio": repr(evc_count / tvc_count), "status": status,
            })
    if cfg.output_path is not None:
        write_csv(rows, SPACE_COLUMNS, cfg.output_path)
    return rows


def write_csv(rows: list[dict], columns: tuple[str, ...], path) -> None:
    """Write rows to a path or an already-open text stream."""
    if hasattr(path, "write"):
        _write_csv_stream(rows, columns, path)
        return
    with open(path, "w", newline="") as fh:
        _write_csv_stream(rows, columns, fh)


def _write_csv_stream(rows, columns, fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=list(columns))
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
