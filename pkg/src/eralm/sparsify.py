# Importance sampling and entrywise sparsification of Gibbs kernels
# =================================================================

# Sampling probabilities mix the previous iterate with a rank-one floor,

#     p_jk = gamma x_jk / sum(x) + (1 - gamma) sqrt(a_j b_k) / (sum sqrt(a) sum sqrt(b)),

# and each index (j, k) enters the support independently with probability
# p*_jk = min(1, n_s p_jk) (Poisson sampling). Dividing kept kernel entries by p*
# makes the sparsified kernel an unbiased estimate of the dense one.

# Randomness: row j of a draw keyed by `seed` uses its own Philox stream seeded
# with SeedSequence(seed + (j,)), so a support does not depend on evaluation order.


from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy
import scipy.sparse

from eralm.core import (
    DomainError,
    FArray,
    IArray,
    Marginal,
    Matrix,
    Plan,
    gather_entries,
    matrix_values,
)
from eralm.sinkhorn import KernelMatrix

logger = logging.getLogger(__name__)

EntryFunction = Callable[[IArray, IArray], FArray]


@dataclass(frozen=True, eq=False)
class SamplingDistribution:
    """
    p = gamma * plan_part + (1 - gamma) * outer(row_weights, col_weights)

    plan_part is the previous iterate normalized to unit mass (dense or csr,
    None when gamma == 0); the rank-one part is never materialized.
    """

    shape: tuple[int, int]
    gamma: float
    plan_part: Matrix | None
    row_weights: FArray
    col_weights: FArray

    def entries(self, rows: IArray, cols: IArray) -> FArray:
        rows = numpy.asarray(rows, dtype=numpy.int64)
        cols = numpy.asarray(cols, dtype=numpy.int64)
        out = (1.0 - self.gamma) * self.row_weights[rows] * self.col_weights[cols]
        if self.plan_part is not None and self.gamma > 0:
            out = out + self.gamma * gather_entries(self.plan_part, rows, cols)
        return numpy.asarray(out)

    def dense(self) -> FArray:
        out = (1.0 - self.gamma) * numpy.outer(self.row_weights, self.col_weights)
        if self.plan_part is not None and self.gamma > 0:
            part = self.plan_part
            out += self.gamma * (part.toarray() if scipy.sparse.issparse(part) else part)
        return numpy.asarray(out)


def mixture_probabilities(
    X_prev: Plan | Matrix,
    a: Marginal,
    b: Marginal,
    gamma: float,
) -> SamplingDistribution:
    """
    Purpose: mixture sampling distribution of the sampled methods
    Input:
        -- X_prev: previous iterate (dense or csr)
        -- a, b: block marginals
        -- gamma: interpolation factor in [0, 1]
    Output:
        -- SamplingDistribution summing to one
    """
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"the interpolation factor must lie in [0, 1], got {gamma}")
    values = matrix_values(X_prev)
    shape = (int(values.shape[0]), int(values.shape[1]))
    if shape != (a.length, b.length):
        raise DomainError(f"previous iterate has shape {shape}, marginals need {(a.length, b.length)}")
    plan_part: Matrix | None = None
    if gamma > 0:
        total = float(values.sum())
        if not total > 0:
            raise DomainError("mixture sampling with gamma > 0 needs a previous iterate with positive mass")
        if scipy.sparse.issparse(values):
            plan_part = scipy.sparse.csr_array(values * (1.0 / total))
        else:
            plan_part = numpy.asarray(values) / total
    sqrt_a = numpy.sqrt(a.masses)
    sqrt_b = numpy.sqrt(b.masses)
    return SamplingDistribution(
        shape=shape,
        gamma=float(gamma),
        plan_part=plan_part,
        row_weights=sqrt_a / sqrt_a.sum(),
        col_weights=sqrt_b / sqrt_b.sum(),
    )


@dataclass(frozen=True, eq=False)
class SampledSupport:
    """Row-major sorted index set I with inclusion probabilities p* in (0, 1]."""

    shape: tuple[int, int]
    rows: IArray
    cols: IArray
    pstar: FArray
    seed: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        rows = numpy.asarray(self.rows, dtype=numpy.int64)
        cols = numpy.asarray(self.cols, dtype=numpy.int64)
        pstar = numpy.asarray(self.pstar, dtype=numpy.float64)
        if not rows.shape == cols.shape == pstar.shape:
            raise DomainError("support rows, cols and pstar must have equal lengths")
        linear = rows * self.shape[1] + cols
        if linear.size > 1 and numpy.any(numpy.diff(linear) <= 0):
            raise DomainError("support indices must be strictly increasing in row-major order")
        if pstar.size and (numpy.min(pstar) <= 0 or numpy.max(pstar) > 1):
            raise DomainError("inclusion probabilities must lie in (0, 1]")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "pstar", pstar)

    @property
    def size(self) -> int:
        return int(self.rows.size)

    @property
    def is_full(self) -> bool:
        m, n = self.shape
        return self.size == m * n

    def write(self, path: Path | str) -> None:
        """`m n size` header, then `row col pstar` lines"""
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(f"{self.shape[0]} {self.shape[1]} {self.size}\n")
            for r, c, p in zip(self.rows, self.cols, self.pstar):
                handle.write(f"{int(r)} {int(c)} {float(p):.17g}\n")

    @classmethod
    def read(cls, path: Path | str) -> "SampledSupport":
        with open(path, encoding="utf-8") as handle:
            m, n, size = (int(tok) for tok in handle.readline().split())
            table = numpy.loadtxt(handle, ndmin=2) if size else numpy.zeros((0, 3))
        return cls((m, n), table[:, 0].astype(numpy.int64), table[:, 1].astype(numpy.int64), table[:, 2])


def _row_stream(key: Sequence[int], row: int) -> numpy.random.Generator:
    return numpy.random.Generator(numpy.random.Philox(numpy.random.SeedSequence([*key, row])))


def _seed_key(seed: int | Sequence[int]) -> tuple[int, ...]:
    key = (int(seed),) if isinstance(seed, (int, numpy.integer)) else tuple(int(s) for s in seed)
    if any(s < 0 for s in key):
        raise DomainError("sampling seeds must be nonnegative")
    return key


def _dense_sample(P: SamplingDistribution, n_s: int, key: tuple[int, ...]) -> tuple[IArray, IArray, FArray]:
    m, n = P.shape
    pstar = numpy.minimum(1.0, n_s * P.dense())
    rows: list[IArray] = []
    cols: list[IArray] = []
    probs: list[FArray] = []
    for j in range(m):
        draws = _row_stream(key, j).random(n)
        keep = numpy.flatnonzero(draws < pstar[j])
        rows.append(numpy.full(keep.size, j, dtype=numpy.int64))
        cols.append(keep.astype(numpy.int64))
        probs.append(pstar[j, keep])
    return numpy.concatenate(rows), numpy.concatenate(cols), numpy.concatenate(probs)


def _accelerated_sample(
    P: SamplingDistribution, n_s: int, key: tuple[int, ...]
) -> tuple[IArray, IArray, FArray]:
    """
    Exact Poisson sampling in O(nnz(plan_part) + n_s) expected work per draw.

    Entries stored in plan_part are tested directly. Elsewhere p is rank-one:
    per row, Binomial(n, q_max) uniform proposals are thinned with q_k / q_max.
    """
    m, n = P.shape
    rank_one = (1.0 - P.gamma) * n_s
    part = None
    if P.plan_part is not None and P.gamma > 0:
        part = scipy.sparse.csr_array(P.plan_part)
        part.sum_duplicates()
        part.sort_indices()
    col_max = float(numpy.max(P.col_weights))
    rows: list[IArray] = []
    cols: list[IArray] = []
    probs: list[FArray] = []
    for j in range(m):
        rng = _row_stream(key, j)
        stored = numpy.zeros(0, dtype=numpy.int64)
        kept_cols = [numpy.zeros(0, dtype=numpy.int64)]
        kept_probs = [numpy.zeros(0)]
        if part is not None:
            lo, hi = part.indptr[j], part.indptr[j + 1]
            stored = part.indices[lo:hi].astype(numpy.int64)
            p_stored = P.gamma * part.data[lo:hi] + (1.0 - P.gamma) * P.row_weights[j] * P.col_weights[stored]
            pstar = numpy.minimum(1.0, n_s * p_stored)
            keep = rng.random(stored.size) < pstar
            kept_cols.append(stored[keep])
            kept_probs.append(pstar[keep])
        q_max = min(1.0, rank_one * P.row_weights[j] * col_max)
        if q_max > 0:
            count = int(rng.binomial(n, q_max))
            proposals = numpy.sort(rng.choice(n, size=count, replace=False)).astype(numpy.int64)
            proposals = proposals[~numpy.isin(proposals, stored)]
            q = numpy.minimum(1.0, rank_one * P.row_weights[j] * P.col_weights[proposals])
            keep = rng.random(proposals.size) < q / q_max
            kept_cols.append(proposals[keep])
            kept_probs.append(q[keep])
        c = numpy.concatenate(kept_cols)
        p = numpy.concatenate(kept_probs)
        order = numpy.argsort(c, kind="stable")
        nonzero = p[order] > 0
        cols.append(c[order][nonzero])
        probs.append(p[order][nonzero])
        rows.append(numpy.full(int(nonzero.sum()), j, dtype=numpy.int64))
    return numpy.concatenate(rows), numpy.concatenate(cols), numpy.concatenate(probs)


def poisson_sample(
    P: SamplingDistribution,
    n_s: int,
    seed: int | Sequence[int],
    accelerated: bool = False,
) -> SampledSupport:
    """
    Purpose: independent inclusion of every index (j, k) with probability min(1, n_s p_jk)
    Input:
        -- P: sampling distribution
        -- n_s: expected sample size parameter
        -- seed: nonnegative int or tuple of ints (e.g. (seed, t, block, attempt))
        -- accelerated: skip materializing the dense probability grid
    Output:
        -- SampledSupport, deterministic in seed
    """
    if n_s < 1:
        raise DomainError(f"n_s must be at least 1, got {n_s}")
    key = _seed_key(seed)
    sampler = _accelerated_sample if accelerated else _dense_sample
    rows, cols, pstar = sampler(P, int(n_s), key)
    logger.debug("poisson_sample %s: kept %d of %d entries (n_s=%d)", P.shape, rows.size, P.shape[0] * P.shape[1], n_s)
    return SampledSupport(P.shape, rows, cols, pstar, key)


def full_support(shape: tuple[int, int]) -> SampledSupport:
    """Every index with p* = 1."""
    m, n = shape
    rows, cols = numpy.divmod(numpy.arange(m * n, dtype=numpy.int64), n)
    return SampledSupport(shape, rows, cols, numpy.ones(m * n))


def sparsify_kernel(kernel_entry_fn: EntryFunction, support: SampledSupport) -> KernelMatrix:
    """
    Purpose: sparsified kernel psi_jk / p*_jk on the support, 0 elsewhere
    Input:
        -- kernel_entry_fn: vectorized (rows, cols) -> kernel entries, called once on the support only
        -- support: sampled index set
    Output:
        -- csr KernelMatrix with exactly support.size stored entries
    """
    values = numpy.asarray(kernel_entry_fn(support.rows, support.cols), dtype=numpy.float64)
    if values.shape != support.rows.shape:
        raise DomainError("kernel entry function returned the wrong number of values")
    matrix = scipy.sparse.csr_array((values / support.pstar, (support.rows, support.cols)), shape=support.shape)
    return KernelMatrix(matrix)


def sparsify_log_kernel(log_entry_fn: EntryFunction, support: SampledSupport) -> scipy.sparse.csr_array:
    """
    Purpose: logarithm of sparsify_kernel, for parameters at which psi underflows
    Input:
        -- log_entry_fn: vectorized (rows, cols) -> log psi_jk (-inf for zero entries)
        -- support: sampled index set
    Output:
        -- csr log-kernel log psi_jk - log p*_jk with exactly support.size stored entries
    """
    logs = numpy.asarray(log_entry_fn(support.rows, support.cols), dtype=numpy.float64)
    if logs.shape != support.rows.shape:
        raise DomainError("kernel entry function returned the wrong number of values")
    logs = logs - numpy.log(support.pstar)
    return scipy.sparse.csr_array((logs, (support.rows, support.cols)), shape=support.shape)


def effective_cost(cost_entry_fn: EntryFunction, lam: float, support: SampledSupport) -> scipy.sparse.csr_array:
    """c_jk + lam log p*_jk on the support; exp(-c_hat / lam) equals the sparsified Gibbs kernel."""
    if not lam > 0:
        raise DomainError("the regularization parameter must be positive")
    costs = numpy.asarray(cost_entry_fn(support.rows, support.cols), dtype=numpy.float64)
    values = costs + lam * numpy.log(support.pstar)
    return scipy.sparse.csr_array((values, (support.rows, support.cols)), shape=support.shape)
