# Shared types and functionals for multi-block problems over transport polytopes
# ==============================================================================

# A transport polytope U(a, b) is the set of nonnegative m x n matrices whose row
# sums are a and whose column sums are b. The multi-block problem is

#     min f(X_1, ..., X_N)   s.t.   X_i in U(a_i, b_i),  i = 1, ..., N.

# This module holds what every solver needs:
#     1. marginals and plans (dense numpy arrays or scipy csr arrays)
#     2. the negative entropy h(T) = sum t (log t - 1) and the KL divergence
#     3. an exact transportation simplex (north-west corner start, MODI pricing,
#        Orden perturbation against degenerate bases)
#     4. the stationarity residual R(X) = sum_i <grad_i f(X), X_i> - min_U <grad_i f(X), T>

# Convention: 0 * log 0 = 0 everywhere.


from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy
import scipy.sparse
import scipy.special
from numpy.typing import NDArray

# type aliases
FArray = NDArray[numpy.float64]
IArray = NDArray[numpy.int64]
Matrix = Union[FArray, scipy.sparse.csr_array]

logger = logging.getLogger(__name__)

# "X in U(a, b)" means an infinity-norm marginal violation below this value
FEASIBILITY_TOL: float = 1e-6


class EralmError(Exception):
    """Base class of every error raised by this package."""


class DomainError(EralmError, ValueError):
    """Invalid input: negative entries, mismatched masses or shapes, unsupported options."""


class NumericalError(EralmError):
    """Overflow, underflow or an exhausted iteration budget."""


class InfeasibleSubproblemError(NumericalError):
    """A (sampled) subproblem whose support admits no plan with the prescribed marginals."""


class ResourceLimitError(EralmError):
    """A requested problem would exceed a user-given memory guard."""


@dataclass(frozen=True, eq=False)
class Marginal:
    """
    Nonnegative mass vector, one side of a transport polytope.

    The stored array is a read-only copy of the input.
    """

    masses: FArray

    def __post_init__(self) -> None:
        masses = numpy.array(self.masses, dtype=numpy.float64).ravel()
        if masses.size == 0:
            raise DomainError("a marginal needs at least one atom")
        if not numpy.all(numpy.isfinite(masses)):
            raise DomainError("marginal masses must be finite")
        if numpy.any(masses < 0):
            raise DomainError("marginal masses must be nonnegative")
        if not numpy.any(masses > 0):
            raise DomainError("a marginal needs at least one positive mass")
        masses.setflags(write=False)
        object.__setattr__(self, "masses", masses)

    @property
    def length(self) -> int:
        return int(self.masses.size)

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def __len__(self) -> int:
        return self.length


def _as_csr(values: Matrix) -> scipy.sparse.csr_array:
    out = scipy.sparse.csr_array(values, dtype=numpy.float64)
    out.sum_duplicates()
    out.sort_indices()
    return out


def matrix_values(T: Union["Plan", Matrix]) -> Matrix:
    """Return the raw matrix behind a Plan (or the matrix itself)."""
    if isinstance(T, Plan):
        return T.values
    if scipy.sparse.issparse(T):
        return T
    return numpy.asarray(T, dtype=numpy.float64)


def dense(T: Union["Plan", Matrix]) -> FArray:
    """Dense float view of a plan or matrix."""
    values = matrix_values(T)
    if scipy.sparse.issparse(values):
        return numpy.asarray(values.toarray(), dtype=numpy.float64)
    return numpy.asarray(values, dtype=numpy.float64)


def row_sums(values: Matrix) -> FArray:
    return numpy.asarray(values.sum(axis=1), dtype=numpy.float64).ravel()


def col_sums(values: Matrix) -> FArray:
    return numpy.asarray(values.sum(axis=0), dtype=numpy.float64).ravel()


def inner(A: Matrix, B: Matrix) -> float:
    """Frobenius inner product <A, B> for any mix of dense and csr operands."""
    if scipy.sparse.issparse(A):
        return float(A.multiply(B).sum())
    if scipy.sparse.issparse(B):
        return float(B.multiply(A).sum())
    return float(numpy.vdot(A, B))


def gather_entries(values: Matrix, rows: IArray, cols: IArray) -> FArray:
    """
    Purpose: read the entries (rows[k], cols[k]) of a dense or csr matrix
    Output:
        -- 1-D array; absent sparse entries read as 0
    """
    rows = numpy.asarray(rows, dtype=numpy.int64)
    cols = numpy.asarray(cols, dtype=numpy.int64)
    if not scipy.sparse.issparse(values):
        return numpy.asarray(values, dtype=numpy.float64)[rows, cols]
    csr = _as_csr(values)
    n = csr.shape[1]
    counts = numpy.diff(csr.indptr)
    stored_rows = numpy.repeat(numpy.arange(csr.shape[0], dtype=numpy.int64), counts)
    stored = stored_rows * n + csr.indices.astype(numpy.int64)
    wanted = rows * n + cols
    pos = numpy.searchsorted(stored, wanted)
    pos_clipped = numpy.minimum(pos, max(stored.size - 1, 0))
    out = numpy.zeros(wanted.size, dtype=numpy.float64)
    if stored.size:
        hit = stored[pos_clipped] == wanted
        out[hit] = csr.data[pos_clipped[hit]]
    return out


@dataclass(frozen=True, eq=False)
class Plan:
    """
    Coupling matrix with optional row/column marginal targets.

    Storage is whatever the caller chose: a dense array or a canonical csr array
    (sorted, deduplicated indices). Plans are never converted automatically.
    """

    values: Matrix
    row_target: Marginal | None = None
    col_target: Marginal | None = None

    def __post_init__(self) -> None:
        if scipy.sparse.issparse(self.values):
            values: Matrix = _as_csr(self.values)
            data = values.data
        else:
            values = numpy.array(self.values, dtype=numpy.float64)
            if values.ndim != 2:
                raise DomainError(f"a plan must be a matrix, got shape {values.shape}")
            values.setflags(write=False)
            data = values
        if data.size and (not numpy.all(numpy.isfinite(data)) or numpy.min(data) < 0):
            raise DomainError("plan entries must be finite and nonnegative")
        m, n = values.shape
        if self.row_target is not None and self.row_target.length != m:
            raise DomainError(f"row target has {self.row_target.length} atoms, plan has {m} rows")
        if self.col_target is not None and self.col_target.length != n:
            raise DomainError(f"column target has {self.col_target.length} atoms, plan has {n} columns")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        m, n = self.values.shape
        return int(m), int(n)

    @property
    def is_sparse(self) -> bool:
        return bool(scipy.sparse.issparse(self.values))

    @property
    def nnz(self) -> int:
        if self.is_sparse:
            return int(numpy.count_nonzero(self.values.data))
        return int(numpy.count_nonzero(self.values))

    def toarray(self) -> FArray:
        return dense(self.values)

    def row_sums(self) -> FArray:
        return row_sums(self.values)

    def col_sums(self) -> FArray:
        return col_sums(self.values)

    def support(self) -> tuple[IArray, IArray]:
        """Row-major sorted (row, col) indices of the nonzero entries."""
        if self.is_sparse:
            coo = self.values.tocoo()
            keep = coo.data != 0
            rows = coo.row[keep].astype(numpy.int64)
            cols = coo.col[keep].astype(numpy.int64)
            order = numpy.lexsort((cols, rows))
            return rows[order], cols[order]
        rows, cols = numpy.nonzero(self.values)
        return rows.astype(numpy.int64), cols.astype(numpy.int64)

    @classmethod
    def from_support(
        cls,
        rows: IArray,
        cols: IArray,
        values: FArray,
        shape: tuple[int, int],
        row_target: Marginal | None = None,
        col_target: Marginal | None = None,
    ) -> "Plan":
        matrix = scipy.sparse.csr_array((values, (rows, cols)), shape=shape)
        return cls(matrix, row_target, col_target)


@dataclass(frozen=True)
class ObjectiveOracle:
    """
    Objective f(X_1, ..., X_N) and its block gradients C_i = grad_i f.

    Input
        -- shapes: per-block (m_i, n_i)
        -- objective_fn: blocks -> f value
        -- gradient_fn: (i, blocks) -> dense m_i x n_i gradient
    """

    shapes: tuple[tuple[int, int], ...]
    objective_fn: Callable[[Sequence[Matrix]], float]
    gradient_fn: Callable[[int, Sequence[Matrix]], FArray]

    @property
    def block_count(self) -> int:
        return len(self.shapes)

    def objective(self, blocks: Sequence[Matrix]) -> float:
        return float(self.objective_fn(blocks))

    def block_gradient(self, i: int, blocks: Sequence[Matrix]) -> FArray:
        grad = numpy.asarray(self.gradient_fn(i, blocks), dtype=numpy.float64)
        if grad.shape != tuple(self.shapes[i]):
            raise DomainError(f"gradient of block {i} has shape {grad.shape}, expected {self.shapes[i]}")
        return grad


def _product_entropy(a: Marginal, b: Marginal) -> float:
    """h(a b^T) without forming the outer product twice."""
    return neg_entropy(numpy.outer(a.masses, b.masses))


@dataclass(frozen=True)
class TheoryBound:
    """
    Constants entering the ergodic residual bound of the ERALM method.

    d_i = min{sqrt(m_i) |a_i|_inf, sqrt(n_i) |b_i|_inf}, d_bar = max_i d_i and
    h_bar = -min_i h(a_i b_i^T).
    """

    L: float
    f_lower: float
    d_bar: float
    d: tuple[float, ...]
    h_bar: float
    lam: float
    t_max: int

    def __post_init__(self) -> None:
        if self.L < 0:
            raise DomainError("the Lipschitz constant must be nonnegative")
        if self.h_bar < 0:
            raise DomainError("h_bar must be nonnegative")
        if self.lam < 0:
            raise DomainError("the regularization parameter must be nonnegative")

    @classmethod
    def from_marginals(
        cls,
        marginals: Sequence[tuple[Marginal, Marginal]],
        L: float,
        f_lower: float,
        lam: float,
        t_max: int,
    ) -> "TheoryBound":
        d = tuple(diameter_bound(a, b) for a, b in marginals)
        h_bar = -min(_product_entropy(a, b) for a, b in marginals)
        return cls(L=L, f_lower=f_lower, d_bar=max(d), d=d, h_bar=max(h_bar, 0.0), lam=lam, t_max=t_max)


def neg_entropy(T: Union[Plan, Matrix]) -> float:
    """
    Purpose: negative entropy h(T) = sum_jk t_jk (log t_jk - 1), with 0 log 0 = 0
    Input:
        -- T: plan or matrix with nonnegative entries
    Output:
        -- h(T)
    """
    values = matrix_values(T)
    data = values.data if scipy.sparse.issparse(values) else numpy.asarray(values)
    if data.size and numpy.min(data) < 0:
        raise DomainError("negative entropy is only defined for nonnegative matrices")
    return float(numpy.sum(scipy.special.xlogy(data, data) - data))


def kl_divergence(T: Union[Plan, Matrix], T_ref: Union[Plan, Matrix]) -> float:
    """
    Purpose: KL(T; T_ref) = sum [t (log t - log t') - (t - t')]
    Output:
        -- +inf when some t > 0 sits on a zero of T_ref
    """
    t = dense(T)
    t_ref = dense(T_ref)
    if t.shape != t_ref.shape:
        raise DomainError(f"KL divergence needs equal shapes, got {t.shape} and {t_ref.shape}")
    if numpy.min(t, initial=0.0) < 0 or numpy.min(t_ref, initial=0.0) < 0:
        raise DomainError("KL divergence is only defined for nonnegative matrices")
    if numpy.any((t > 0) & (t_ref == 0)):
        return float("inf")
    return float(numpy.sum(scipy.special.xlogy(t, t) - scipy.special.xlogy(t, t_ref) - t + t_ref))


def violation_of(values: Matrix, a: FArray, b: FArray) -> float:
    """Infinity-norm marginal violation of a raw matrix against mass vectors."""
    row_err = numpy.max(numpy.abs(row_sums(values) - a))
    col_err = numpy.max(numpy.abs(col_sums(values) - b))
    return float(max(row_err, col_err))


def marginal_violation(T: Plan) -> float:
    """max of the row-sum and column-sum infinity-norm errors of T against its targets"""
    if T.row_target is None or T.col_target is None:
        raise DomainError("marginal violation needs a plan with row and column targets")
    return violation_of(T.values, T.row_target.masses, T.col_target.masses)


def _check_masses(a: Marginal, b: Marginal) -> None:
    scale = max(a.total, b.total, 1.0)
    if abs(a.total - b.total) > 1e-9 * scale:
        raise DomainError(f"marginals carry different total masses ({a.total:.17g} vs {b.total:.17g})")


def diameter_bound(a: Marginal, b: Marginal) -> float:
    """
    Size bound d = min{sqrt(m) |a|_inf, sqrt(n) |b|_inf} of U(a, b):
    any two feasible plans satisfy |T - T'| <= 2 d in Frobenius norm.
    """
    _check_masses(a, b)
    m, n = a.length, b.length
    return float(min(numpy.sqrt(m) * numpy.max(a.masses), numpy.sqrt(n) * numpy.max(b.masses)))


# Transportation simplex
# ----------------------
# The basis is a spanning tree of the bipartite graph rows x columns with
# m + n - 1 cells. Node ids: rows are 0..m-1, columns are m..m+n-1.


def _northwest_corner(supply: FArray, demand: FArray) -> tuple[list[tuple[int, int]], list[float]]:
    s = supply.copy()
    d = demand.copy()
    m, n = s.size, d.size
    cells: list[tuple[int, int]] = []
    flows: list[float] = []
    j = k = 0
    while True:
        q = min(s[j], d[k])
        cells.append((j, k))
        flows.append(float(q))
        s[j] -= q
        d[k] -= q
        if j == m - 1 and k == n - 1:
            break
        if (s[j] <= d[k] and j < m - 1) or k == n - 1:
            j += 1
        else:
            k += 1
    return cells, flows


def _tree_potentials(adjacency: list[set[int]], cost: FArray, m: int) -> tuple[FArray, FArray]:
    n = cost.shape[1]
    pot = numpy.full(m + n, numpy.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for other in adjacency[node]:
            if not numpy.isnan(pot[other]):
                continue
            if node < m:
                pot[other] = cost[node, other - m] - pot[node]
            else:
                pot[other] = cost[other, node - m] - pot[node]
            queue.append(other)
    if numpy.any(numpy.isnan(pot)):
        raise NumericalError("transportation simplex basis is not a spanning tree")
    return pot[:m], pot[m:]


def _tree_path(adjacency: list[set[int]], start: int, goal: int) -> list[int]:
    parent = {start: -1}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for other in adjacency[node]:
            if other not in parent:
                parent[other] = node
                queue.append(other)
    if goal not in parent:
        raise NumericalError("transportation simplex basis is disconnected")
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    path.reverse()
    return path


def _tree_flows(basis: set[tuple[int, int]], supply: FArray, demand: FArray) -> dict[tuple[int, int], float]:
    """Basic solution of the tree system by repeated leaf elimination."""
    m, n = supply.size, demand.size
    adjacency: list[set[int]] = [set() for _ in range(m + n)]
    for j, k in basis:
        adjacency[j].add(m + k)
        adjacency[m + k].add(j)
    rest = numpy.concatenate([supply, demand]).astype(numpy.float64)
    flows: dict[tuple[int, int], float] = {}
    leaves = deque(node for node in range(m + n) if len(adjacency[node]) == 1)
    while leaves:
        leaf = leaves.popleft()
        if len(adjacency[leaf]) != 1:
            continue
        other = adjacency[leaf].pop()
        adjacency[other].discard(leaf)
        cell = (leaf, other - m) if leaf < m else (other, leaf - m)
        flows[cell] = float(rest[leaf])
        rest[other] -= rest[leaf]
        rest[leaf] = 0.0
        if len(adjacency[other]) == 1:
            leaves.append(other)
    return flows


def transport_lp(
    W: FArray,
    a: Marginal,
    b: Marginal,
    max_pivots: int | None = None,
) -> tuple[Plan, float]:
    """
    Purpose: exact optimal vertex of min <W, T> s.t. T in U(a, b)
    Input:
        -- W: m x n finite cost matrix
        -- a, b: marginals with equal total mass
        -- max_pivots: iteration cap (default 20 (m + n) max(m, n) + 100)
    Output:
        -- (optimal dense plan, optimal value)
    Method:
        transportation simplex from the north-west corner with MODI pricing.
        Supplies get +eps and the last demand +m*eps (Orden), which makes every
        basis nondegenerate; the final flows are recomputed on the optimal tree
        with the unperturbed masses.
    """
    cost = numpy.asarray(W, dtype=numpy.float64)
    m, n = a.length, b.length
    if cost.shape != (m, n):
        raise DomainError(f"cost has shape {cost.shape}, marginals need {(m, n)}")
    if not numpy.all(numpy.isfinite(cost)):
        raise DomainError("transport costs must be finite")
    _check_masses(a, b)
    supply = a.masses.astype(numpy.float64)
    demand = b.masses * (a.total / b.total)
    if max_pivots is None:
        max_pivots = 20 * (m + n) * max(m, n) + 100

    eps = 1e-9 * a.total / (m + n)
    cells, flows = _northwest_corner(supply + eps, numpy.concatenate([demand[:-1], demand[-1:] + m * eps]))
    x = numpy.zeros((m, n))
    in_basis = numpy.zeros((m, n), dtype=bool)
    adjacency: list[set[int]] = [set() for _ in range(m + n)]
    for (j, k), q in zip(cells, flows):
        x[j, k] = q
        in_basis[j, k] = True
        adjacency[j].add(m + k)
        adjacency[m + k].add(j)

    cost_tol = 1e-12 * max(1.0, float(numpy.max(numpy.abs(cost))))
    pivots = 0
    while True:
        u, v = _tree_potentials(adjacency, cost, m)
        reduced = cost - u[:, None] - v[None, :]
        reduced[in_basis] = 0.0
        flat = int(numpy.argmin(reduced))
        j_in, k_in = divmod(flat, n)
        if reduced[j_in, k_in] >= -cost_tol:
            break
        if pivots >= max_pivots:
            raise NumericalError(
                f"transportation simplex hit the pivot cap ({max_pivots}) on a {m}x{n} problem; "
                f"most negative reduced cost {reduced[j_in, k_in]:.3e}"
            )
        # cycle: entering cell (+), then alternate - / + along the tree path row j_in -> column k_in
        path = _tree_path(adjacency, j_in, m + k_in)
        minus: list[tuple[int, int]] = []
        plus: list[tuple[int, int]] = [(j_in, k_in)]
        for step, (p, q) in enumerate(zip(path[:-1], path[1:])):
            cell = (p, q - m) if p < m else (q, p - m)
            (minus if step % 2 == 0 else plus).append(cell)
        theta_cell = min(minus, key=lambda c: (x[c], c))
        theta = x[theta_cell]
        for c in plus:
            x[c] += theta
        for c in minus:
            x[c] -= theta
        x[theta_cell] = 0.0
        j_out, k_out = theta_cell
        in_basis[j_out, k_out] = False
        adjacency[j_out].discard(m + k_out)
        adjacency[m + k_out].discard(j_out)
        in_basis[j_in, k_in] = True
        adjacency[j_in].add(m + k_in)
        adjacency[m + k_in].add(j_in)
        pivots += 1

    basis = {(int(j), int(k)) for j, k in zip(*numpy.nonzero(in_basis))}
    plan = numpy.zeros((m, n))
    for (j, k), q in _tree_flows(basis, supply, demand).items():
        plan[j, k] = q
    floor = -1e-12 * max(a.total, 1.0)
    if numpy.min(plan) < floor:
        raise NumericalError(
            f"transportation simplex ended on an infeasible basis (min flow {numpy.min(plan):.3e}, {pivots} pivots)"
        )
    plan = numpy.maximum(plan, 0.0)
    logger.debug("transport_lp %dx%d solved in %d pivots", m, n, pivots)
    return Plan(plan, a, b), float(numpy.sum(cost * plan))


def residual(
    X: Sequence[Plan],
    oracle: ObjectiveOracle,
    tol: float = FEASIBILITY_TOL,
) -> tuple[FArray, float]:
    """
    Purpose: stationarity residual R_i(X) = <C_i, X_i> - min_{T in U(a_i, b_i)} <C_i, T>, C_i = grad_i f(X)
    Input:
        -- X: one plan per block, each with row/column targets
        -- oracle: objective and block gradients
        -- tol: admissible marginal violation of each X_i
    Output:
        -- (per-block residuals, their sum); zero exactly at KKT points
    """
    if len(X) != oracle.block_count:
        raise DomainError(f"oracle has {oracle.block_count} blocks, got {len(X)} plans")
    blocks = [plan.values for plan in X]
    per_block = numpy.zeros(len(X))
    for i, plan in enumerate(X):
        violation = marginal_violation(plan)
        if violation > tol:
            raise DomainError(f"block {i} is infeasible (marginal violation {violation:.3e} > {tol:.1e})")
        grad = oracle.block_gradient(i, blocks)
        assert plan.row_target is not None and plan.col_target is not None
        _, best = transport_lp(grad, plan.row_target, plan.col_target)
        per_block[i] = inner(plan.values, grad) - best
    return per_block, float(per_block.sum())


# Coordinate text format
# ----------------------


def write_plan(path: Path | str, plan: Plan | Matrix) -> None:
    """Write `m n nnz` then one `row col value` line per nonzero (0-based, %.17g)."""
    values = matrix_values(plan)
    m, n = values.shape
    if scipy.sparse.issparse(values):
        coo = _as_csr(values).tocoo()
        rows, cols, data = coo.row, coo.col, coo.data
        keep = data != 0
        rows, cols, data = rows[keep], cols[keep], data[keep]
    else:
        rows, cols = numpy.nonzero(values)
        data = numpy.asarray(values)[rows, cols]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{m} {n} {rows.size}\n")
        for r, c, val in zip(rows, cols, data):
            handle.write(f"{int(r)} {int(c)} {float(val):.17g}\n")


def read_plan(
    path: Path | str,
    row_target: Marginal | None = None,
    col_target: Marginal | None = None,
) -> Plan:
    """Read a plan written by write_plan; the result is stored sparse."""
    with open(path, encoding="utf-8") as handle:
        header = handle.readline().split()
        if len(header) != 3:
            raise DomainError(f"{path}: expected header 'm n nnz'")
        m, n, nnz = (int(tok) for tok in header)
        table = numpy.loadtxt(handle, ndmin=2) if nnz else numpy.zeros((0, 3))
    if table.shape[0] != nnz:
        raise DomainError(f"{path}: header announces {nnz} entries, found {table.shape[0]}")
    rows = table[:, 0].astype(numpy.int64)
    cols = table[:, 1].astype(numpy.int64)
    return Plan.from_support(rows, cols, table[:, 2], (m, n), row_target, col_target)


def write_marginal(path: Path | str, marginal: Marginal | FArray) -> None:
    """One value per line, %.17g."""
    masses = marginal.masses if isinstance(marginal, Marginal) else numpy.asarray(marginal)
    numpy.savetxt(path, masses, fmt="%.17g")


def read_marginal(path: Path | str) -> Marginal:
    return Marginal(numpy.loadtxt(path, ndmin=1))
