"""Unique-term Volterra filtering and its 2D convolution layer.

Where the dense path enumerates all n^j index tuples per order, this path
keeps one representative per multiset, so order-j work scales with
binomial(n+j-1, j).  Term vectors are built progressively: an order-j term
is one input element times an order-(j-1) term, with the pairing given by
the precomputed gather tables.

The backward pass never materializes the scatter matrix that pairs weights
with lower-order terms; it runs the scatter directly off the same gather
tables, once per variant, in a fixed deterministic order (within an input
position, ascending term row; positions and variants in ascending order).

conv2d_forward / conv2d_backward lift the per-patch filter to a 2D
convolution through im2col, sharing one term cache across all output
channels of a patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dense import DEFAULT_ELEMENT_BUDGET, ResourceLimitError
from .geometry import ConvGeometry, PatchMatrix, col2im_accumulate, im2col
from .positions import IndexTables, count_terms, index_tables


@dataclass(frozen=True)
class UniqueKernel:
    """One filter in unique-term form: entry j-1 of `weights` is w_{S_j},
    aligned row-for-row with the order-j position table."""

    n: int
    order: int
    weights: tuple[np.ndarray, ...]
    bias: float

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("kernel order must be >= 1")
        if len(self.weights) != self.order:
            raise ValueError("need one weight vector per order")
        for j, w in enumerate(self.weights, start=1):
            expected = count_terms(self.n, j)
            if w.shape != (expected,):
                raise ValueError(
                    f"order-{j} weights have shape {w.shape}, "
                    f"expected ({expected},)"
                )
            w.setflags(write=False)


def random_unique_kernel(n: int, r: int, rng: np.random.Generator) -> UniqueKernel:
    """Standard-normal unique-term kernel, for tests and benchmarks."""
    weights = tuple(
        rng.standard_normal(size=count_terms(n, j)) for j in range(1, r + 1)
    )
    return UniqueKernel(n=n, order=r, weights=weights,
                        bias=float(rng.standard_normal()))


@dataclass(frozen=True)
class TermCache:
    """Per-order unique-term vectors of one input: entry j-1 is x_{S_j},
    aligned row-for-row with the order-j position table."""

    n: int
    order: int
    vectors: tuple[np.ndarray, ...]


def build_terms_progressive(x: np.ndarray, tables: IndexTables,
                            variant: int = 0) -> TermCache:
    """Chain the gather tables to produce all unique-term vectors.

    x_{S_1} = x and x_{S_j} = x[pos] * x_{S_{j-1}}[prev] with (pos, prev)
    from one gather variant of order j (variant `variant`, modulo the j
    available ones).  No repeated term is ever enumerated.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != tables.n:
        raise ValueError(f"input length {x.shape[0]} != table n {tables.n}")
    vectors = [x]
    for j in range(2, tables.order + 1):
        v = tables.pcm(j).variants[variant % j]
        vectors.append(x[v.input_pos] * vectors[-1][v.prev_row])
    return TermCache(n=tables.n, order=tables.order, vectors=tuple(vectors))


def evc_apply(cache: TermCache, kernel: UniqueKernel) -> float:
    """Response from an existing term cache: sum_j w_{S_j} . x_{S_j} + b."""
    if cache.n != kernel.n or cache.order < kernel.order:
        raise ValueError("term cache does not cover this kernel")
    total = kernel.bias
    for w, xs in zip(kernel.weights, cache.vectors):
        total += float(w @ xs)
    return float(total)


def evc_forward(x: np.ndarray, kernel: UniqueKernel,
                tables: IndexTables) -> float:
    """Unique-term Volterra response of one input vector."""
    if tables.n != kernel.n or tables.order < kernel.order:
        raise ValueError("index tables do not match kernel n/order")
    return evc_apply(build_terms_progressive(x, tables), kernel)


def evc_grad_weights(cache: TermCache, upstream: float) -> UniqueKernel:
    """Weight gradients are the cached terms scaled by upstream; bias
    gradient is upstream.  Returned as a kernel-shaped bundle."""
    grads = tuple(upstream * xs for xs in cache.vectors)
    return UniqueKernel(n=cache.n, order=cache.order, weights=grads,
                        bias=float(upstream))


def _scatter_variant(weighted: np.ndarray, variant) -> np.ndarray:
    """Sum `weighted` (one value per term row) into input positions.

    Rows land on position variant.input_pos[k]; the precomputed stable
    permutation groups equal positions contiguously so a single segmented
    reduction covers all of them in ascending-row order.
    """
    if weighted.ndim == 1:
        return np.add.reduceat(weighted[variant.group_perm],
                               variant.group_starts)
    return np.add.reduceat(weighted[:, variant.group_perm],
                           variant.group_starts, axis=1)


def evc_grad_input(cache: TermCache, kernel: UniqueKernel,
                   tables: IndexTables, upstream: float) -> np.ndarray:
    """Input gradient by scatter-add over every gather variant.

    d x_{S_j}[k] / d x[i] splits into j contributions, one per factor of
    the product; variant t of order j enumerates exactly the contributions
    through factor t, as weight[k] * x_{S_{j-1}}[prev] landing on input
    position pos.  The first-order weights add directly.
    """
    if cache.n != kernel.n or cache.order < kernel.order:
        raise ValueError("term cache does not cover this kernel")
    if tables.n != kernel.n or tables.order < kernel.order:
        raise ValueError("index tables do not match kernel n/order")
    grad = kernel.weights[0].astype(np.float64).copy()
    for j in range(2, kernel.order + 1):
        w = kernel.weights[j - 1]
        prev = cache.vectors[j - 2]
        for variant in tables.pcm(j).variants:
            grad += _scatter_variant(w * prev[variant.prev_row], variant)
    return upstream * grad


@dataclass(frozen=True)
class VolterraConvLayer:
    """2D convolution whose per-patch filter is a unique-term Volterra
    kernel over the flattened patch (n = channels * kernel_h * kernel_w).

    weights[j-1] has shape (out_channels, count_terms(n, j)); all output
    channels share the same index tables and per-patch term cache.
    """

    geometry: ConvGeometry
    out_channels: int
    order: int
    weights: tuple[np.ndarray, ...]
    bias: np.ndarray

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.order < 1:
            raise ValueError("order must be >= 1")
        n = self.geometry.patch_len
        if len(self.weights) != self.order:
            raise ValueError("need one weight matrix per order")
        for j, w in enumerate(self.weights, start=1):
            if w.shape != (self.out_channels, count_terms(n, j)):
                raise ValueError(
                    f"order-{j} weight matrix has shape {w.shape}, expected "
                    f"({self.out_channels}, {count_terms(n, j)})"
                )
        if self.bias.shape != (self.out_channels,):
            raise ValueError("bias must have one entry per output channel")

    @property
    def n(self) -> int:
        return self.geometry.patch_len

    @property
    def tables(self) -> IndexTables:
        return index_tables(self.n, self.order)

    def kernel(self, oc: int) -> UniqueKernel:
        """The unique-term kernel of one output channel."""
        return UniqueKernel(
            n=self.n, order=self.order,
            weights=tuple(w[oc].copy() for w in self.weights),
            bias=float(self.bias[oc]),
        )


def init_volterra_layer(geometry: ConvGeometry, out_channels: int, order: int,
                        rng: np.random.Generator) -> VolterraConvLayer:
    """Fresh layer parameters.

    First-order weights get uniform fan-in scaling with variance 2/n
    (bound sqrt(6/n)), which keeps activation variance roughly constant
    through rectified layers; order j >= 2 gets zero-mean uniform scaled
    by 1/count_terms(n, j) so a fresh layer behaves like a slightly
    perturbed linear convolution. Biases start at zero.
    """
    n = geometry.patch_len
    weights = []
    for j in range(1, order + 1):
        count = count_terms(n, j)
        scale = np.sqrt(6.0 / n) if j == 1 else 1.0 / count
        weights.append(rng.uniform(-scale, scale, size=(out_channels, count)))
    return VolterraConvLayer(
        geometry=geometry, out_channels=out_channels, order=order,
        weights=tuple(weights), bias=np.zeros(out_channels),
    )


@dataclass(frozen=True)
class SavedForward:
    """State kept from conv2d_forward for the backward pass."""

    patches: PatchMatrix
    term_matrices: tuple[np.ndarray, ...]  # entry j-1: (n_patches, count_j)
    batch: int


def _batched_terms(patch_rows: np.ndarray, tables: IndexTables,
                   element_budget: int) -> tuple[np.ndarray, ...]:
    """build_terms_progressive over all patch rows at once."""
    n_patches = patch_rows.shape[0]
    total = sum(count_terms(tables.n, j) for j in range(1, tables.order + 1))
    if n_patches * total > element_budget:
        raise ResourceLimitError(
            f"term cache of {n_patches} x {total} elements exceeds the "
            f"element budget of {element_budget:g}"
        )
    mats = [patch_rows]
    for j in range(2, tables.order + 1):
        v = tables.pcm(j).variants[0]
        mats.append(patch_rows[:, v.input_pos] * mats[-1][:, v.prev_row])
    return tuple(mats)


def conv2d_forward(x: np.ndarray, layer: VolterraConvLayer,
                   element_budget: int = DEFAULT_ELEMENT_BUDGET):
    """Volterra convolution over a (batch, channels, h, w) tensor.

    Returns the (batch, out_channels, out_h, out_w) output and the saved
    patch/term state the backward pass needs.  Terms are computed once per
    patch and shared across output channels.
    """
    geom = layer.geometry
    patches = im2col(x, geom)
    tables = layer.tables
    mats = _batched_terms(patches.data, tables, element_budget)
    out_flat = np.tile(layer.bias, (patches.n_patches, 1))
    for w, t in zip(layer.weights, mats):
        out_flat += t @ w.T
    batch = x.shape[0]
    out = (
        out_flat.reshape(batch, geom.out_h, geom.out_w, layer.out_channels)
        .transpose(0, 3, 1, 2)
    )
    saved = SavedForward(patches=patches, term_matrices=mats, batch=batch)
    return np.ascontiguousarray(out), saved


def conv2d_backward(upstream: np.ndarray, saved: SavedForward,
                    layer: VolterraConvLayer):
    """Gradients of a Volterra convolution.

    Weight gradients accumulate upstream-weighted terms over all patches;
    input gradients run the per-order scatter (every variant, all patches
    at once, first-order weights included) and are assembled back onto the
    input plane with col2im_accumulate.
    """
    geom = layer.geometry
    batch = saved.batch
    expected = (batch, layer.out_channels, geom.out_h, geom.out_w)
    if upstream.shape != expected:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match layer output "
            f"{expected}"
        )
    if saved.patches.geometry != geom:
        raise ValueError("saved state comes from a different geometry")
    up_flat = (
        upstream.transpose(0, 2, 3, 1)
        .reshape(batch * geom.out_h * geom.out_w, layer.out_channels)
    )
    bias_grad = up_flat.sum(axis=0)
    weight_grads = tuple(up_flat.T @ t for t in saved.term_matrices)
    tables = layer.tables
    # per-patch input gradients, first order directly
    patch_grad = up_flat @ layer.weights[0]
    for j in range(2, layer.order + 1):
        weighted = up_flat @ layer.weights[j - 1]  # (patches, count_j)
        prev = saved.term_matrices[j - 2]
        for variant in tables.pcm(j).variants:
            patch_grad += _scatter_variant(
                weighted * prev[:, variant.prev_row], variant
            )
    input_grad = col2im_accumulate(
        PatchMatrix(data=patch_grad, geometry=geom), geom, batch
    )
    return input_grad, weight_grads, bias_grad
