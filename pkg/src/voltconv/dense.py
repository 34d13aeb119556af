"""Traditional dense Volterra filtering.

The filter response is y = sum_j w_{R_j}^T x_{R_j} + b where x_{R_j} is the
j-fold Kronecker power of the input.  Weights are kept as full n^j tensors,
so this path is exponential in the order.  It exists as the correctness
oracle and benchmark baseline for the unique-term path, not as something to
run at scale; a hard element budget guards against accidental huge
allocations.

The input gradient follows the transposed-weight scheme: for each order,
sum the weight tensor over all axis-to-front moves, flatten to n x n^(j-1)
and multiply by the previous Kronecker power.  The full n^j x n Jacobian is
never formed here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ELEMENT_BUDGET = 10**8


class ResourceLimitError(RuntimeError):
    """A requested dense computation exceeds the configured element budget."""


def check_budget(n: int, r: int, element_budget: int = DEFAULT_ELEMENT_BUDGET):
    """Refuse dense work whose largest order-j array would exceed the budget."""
    if n**r > element_budget:
        raise ResourceLimitError(
            f"n^r = {n}^{r} exceeds the element budget of {element_budget:g}"
        )


@dataclass(frozen=True)
class DenseKernel:
    """Full Volterra weights: entry j-1 of `weights` is the order-j tensor
    of shape (n,)*j, flattened row-major it is the Kronecker-ordered
    coefficient vector."""

    n: int
    order: int
    weights: tuple[np.ndarray, ...]
    bias: float

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("kernel order must be >= 1")
        if len(self.weights) != self.order:
            raise ValueError("need one weight tensor per order")
        for j, w in enumerate(self.weights, start=1):
            if w.shape != (self.n,) * j:
                raise ValueError(
                    f"order-{j} weights have shape {w.shape}, "
                    f"expected {(self.n,) * j}"
                )
            w.setflags(write=False)


def random_dense_kernel(n: int, r: int, rng: np.random.Generator,
                        element_budget: int = DEFAULT_ELEMENT_BUDGET) -> DenseKernel:
    """Standard-normal dense kernel, for tests and benchmarks."""
    check_budget(n, r, element_budget)
    weights = tuple(
        rng.standard_normal(size=(n,) * j) for j in range(1, r + 1)
    )
    return DenseKernel(n=n, order=r, weights=weights,
                       bias=float(rng.standard_normal()))


@dataclass(frozen=True)
class KroneckerTerms:
    """Per-order Kronecker powers of one input: entry j-1 is x_{R_j}."""

    n: int
    order: int
    vectors: tuple[np.ndarray, ...]


def kron_terms(x: np.ndarray, r: int,
               element_budget: int = DEFAULT_ELEMENT_BUDGET) -> KroneckerTerms:
    """All Kronecker powers x, x (x) x, ... up to order r.

    Ordering is the standard Kronecker convention: leftmost factor index
    varies slowest.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if r < 1:
        raise ValueError("order must be >= 1")
    n = x.shape[0]
    check_budget(n, r, element_budget)
    vectors = [x]
    for _ in range(r - 1):
        vectors.append(np.kron(vectors[-1], x))
    return KroneckerTerms(n=n, order=r, vectors=tuple(vectors))


def tvc_forward(x: np.ndarray, kernel: DenseKernel,
                element_budget: int = DEFAULT_ELEMENT_BUDGET) -> float:
    """Dense Volterra response: sum_j w_{R_j} . x_{R_j} + bias."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != kernel.n:
        raise ValueError(f"input length {x.shape[0]} != kernel n {kernel.n}")
    terms = kron_terms(x, kernel.order, element_budget)
    total = kernel.bias
    for w, xr in zip(kernel.weights, terms.vectors):
        total += float(w.reshape(-1) @ xr)
    return float(total)


def tvc_grad_weights(x: np.ndarray, upstream: float, r: int,
                     element_budget: int = DEFAULT_ELEMENT_BUDGET) -> DenseKernel:
    """Weight gradients: order-j gradient is upstream * x_{R_j} shaped like
    W^(j); bias gradient equals upstream.  Returned as a kernel-shaped
    bundle."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    terms = kron_terms(x, r, element_budget)
    grads = tuple(
        (upstream * xr).reshape((n,) * j)
        for j, xr in enumerate(terms.vectors, start=1)
    )
    return DenseKernel(n=n, order=r, weights=grads, bias=float(upstream))


def folded_weights(kernel: DenseKernel) -> tuple[np.ndarray, ...]:
    """The transposed-weight matrices a_j of the input-gradient scheme.

    a_j sums W^(j) over all j moves of one axis to the front, flattened
    row-major to shape (n, n^(j-1)).  a_1 is W^(1) as a column.
    """
    out = []
    n = kernel.n
    for j, w in enumerate(kernel.weights, start=1):
        if j == 1:
            out.append(w.reshape(n, 1))
            continue
        acc = np.zeros((n, n ** (j - 1)))
        for axis in range(j):
            acc += np.moveaxis(w, axis, 0).reshape(n, n ** (j - 1))
        out.append(acc)
    return tuple(out)


def tvc_grad_input(x: np.ndarray, kernel: DenseKernel, upstream: float,
                   element_budget: int = DEFAULT_ELEMENT_BUDGET) -> np.ndarray:
    """Input gradient via transposed weights, never forming the Jacobian."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != kernel.n:
        raise ValueError(f"input length {x.shape[0]} != kernel n {kernel.n}")
    folds = folded_weights(kernel)
    grad = folds[0][:, 0].copy()
    if kernel.order > 1:
        terms = kron_terms(x, kernel.order - 1, element_budget)
        for j in range(2, kernel.order + 1):
            grad += folds[j - 1] @ terms.vectors[j - 2]
    return upstream * grad


def embed_unique_weights(uk, fpms) -> DenseKernel:
    """Lift a unique-term kernel into dense form for differential testing.

    Each unique weight lands at exactly one tensor position, the canonical
    non-decreasing index tuple; every other permutation slot stays zero.
    Forward responses of the two forms agree for every input.
    """
    n = uk.n
    order = uk.order
    if len(fpms) != order:
        raise ValueError("need one position table per order")
    weights = []
    for j in range(1, order + 1):
        fpm = fpms[j - 1]
        if fpm.n != n or fpm.order != j:
            raise ValueError("position table does not match kernel n/order")
        w = np.zeros((n,) * j)
        flat = np.ravel_multi_index(tuple(fpm.rows.T), (n,) * j)
        w.reshape(-1)[flat] = uk.weights[j - 1]
        weights.append(w)
    return DenseKernel(n=n, order=order, weights=tuple(weights),
                       bias=float(uk.bias))
