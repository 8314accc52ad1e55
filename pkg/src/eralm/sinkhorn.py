# Sinkhorn scaling for entropy-regularized transport subproblems
# =============================================================

# Every block subproblem of the ERALM/KLALM family has the form

#     min <C, T> + lam h(T)   s.t.  T in U(a, b)

# whose solution is T = Diag(u_check) K Diag(v_check) for a Gibbs kernel K. The
# scalings are found by the alternating updates

#     u_check <- a / (K v_check),     v_check <- b / (K^T u_check)

# on dense or csr kernels. The iteration stops once the row sums of the recovered
# plan are within feas_tol of a (the column sums are exact after a v-update).

# sinkhorn_solve_stabilized takes the log-kernel instead. Rows and columns are
# rescaled to a largest entry of 1 and scalings leaving [1e-50, 1e50] are folded
# into per-atom offsets, so the potentials lam log u_check + s stay finite for
# parameters at which exp(-C/lam) underflows.


from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy
import scipy.sparse

from eralm.core import (
    DomainError,
    FArray,
    InfeasibleSubproblemError,
    Marginal,
    Matrix,
    NumericalError,
    Plan,
)

logger = logging.getLogger(__name__)

# log of the largest finite double
_MAX_EXPONENT = float(numpy.log(numpy.finfo(numpy.float64).max))


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    """
    Nonnegative Gibbs kernel, dense or csr.

    The stored matrix is a read-only copy for dense input and a canonical csr
    array (sorted, deduplicated) for sparse input.
    """

    values: Matrix

    def __post_init__(self) -> None:
        if scipy.sparse.issparse(self.values):
            values: Matrix = scipy.sparse.csr_array(self.values, dtype=numpy.float64)
            values.sum_duplicates()
            values.sort_indices()
            data = values.data
        else:
            values = numpy.array(self.values, dtype=numpy.float64)
            if values.ndim != 2:
                raise DomainError(f"a kernel must be a matrix, got shape {values.shape}")
            values.setflags(write=False)
            data = values
        if data.size and (not numpy.all(numpy.isfinite(data)) or numpy.min(data) < 0):
            raise DomainError("kernel entries must be finite and nonnegative")
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
        """number of stored entries (m n for dense kernels)"""
        if self.is_sparse:
            return int(self.values.nnz)
        m, n = self.shape
        return m * n

    def max_entry(self) -> float:
        data = self.values.data if self.is_sparse else self.values
        return float(numpy.max(data)) if data.size else 0.0

    def matvec(self, v: FArray) -> FArray:
        return numpy.asarray(self.values @ v, dtype=numpy.float64).ravel()

    def rmatvec(self, u: FArray) -> FArray:
        return numpy.asarray(self.values.T @ u, dtype=numpy.float64).ravel()

    def scaled(self, u: FArray, v: FArray) -> Matrix:
        """Diag(u) K Diag(v) with the storage of K."""
        if not self.is_sparse:
            return numpy.asarray(u[:, None] * self.values * v[None, :])
        csr = self.values
        rows = numpy.repeat(numpy.arange(csr.shape[0]), numpy.diff(csr.indptr))
        data = csr.data * u[rows] * v[csr.indices]
        return scipy.sparse.csr_array((data, csr.indices.copy(), csr.indptr.copy()), shape=csr.shape)


def _finite_or_zero(values: FArray) -> FArray:
    return numpy.where(numpy.isfinite(values), values, 0.0)


def _exp_entries(log_values: Matrix) -> Matrix:
    if scipy.sparse.issparse(log_values):
        out = scipy.sparse.csr_array(log_values, copy=True)
        out.data = numpy.exp(out.data)
        return out
    return numpy.exp(log_values)


def _log_maxima(log_values: Matrix) -> tuple[FArray, FArray]:
    """row and column maxima of a log-kernel, 0 where a line has no finite entry"""
    if scipy.sparse.issparse(log_values):
        m, n = log_values.shape
        rows = numpy.repeat(numpy.arange(m), numpy.diff(log_values.indptr))
        row_max = numpy.full(m, -numpy.inf)
        col_max = numpy.full(n, -numpy.inf)
        numpy.maximum.at(row_max, rows, log_values.data)
        numpy.maximum.at(col_max, log_values.indices, log_values.data)
    else:
        row_max = numpy.max(log_values, axis=1, initial=-numpy.inf)
        col_max = numpy.max(log_values, axis=0, initial=-numpy.inf)
    return _finite_or_zero(row_max), _finite_or_zero(col_max)


def stabilized_kernel(log_values: Matrix, lam: float) -> tuple[KernelMatrix, FArray, FArray]:
    """
    Purpose: Gibbs kernel exp(log_values) with every row and column rescaled to a largest entry of 1
    Input:
        -- log_values: dense log-kernel, or csr whose stored entries are log values (-inf allowed)
        -- lam: regularization parameter converting the offsets to cost units
    Output:
        -- (kernel, s, q) with exp(log_values) = Diag(exp(-s/lam)) kernel Diag(exp(-q/lam)),
           so the potentials of kernel's scalings are u = lam log u_check + s, v = lam log v_check + q
    """
    if not lam > 0:
        raise DomainError("the regularization parameter must be positive")
    if scipy.sparse.issparse(log_values):
        logs: Matrix = scipy.sparse.csr_array(log_values, dtype=numpy.float64)
        logs.sum_duplicates()
        data = logs.data
    else:
        logs = numpy.asarray(log_values, dtype=numpy.float64)
        if logs.ndim != 2:
            raise DomainError(f"a kernel must be a matrix, got shape {logs.shape}")
        data = logs
    if numpy.any(numpy.isnan(data)) or numpy.any(data == numpy.inf):
        raise DomainError("log-kernel entries must be below +inf")
    m, n = logs.shape
    row_max, _ = _log_maxima(logs)
    logs = shift_log_kernel(logs, -row_max, numpy.zeros(n))
    _, col_max = _log_maxima(logs)
    logs = shift_log_kernel(logs, numpy.zeros(m), -col_max)
    return KernelMatrix(_exp_entries(logs)), -lam * row_max, -lam * col_max


def shift_log_kernel(log_values: Matrix, row: FArray, col: FArray) -> Matrix:
    """log_values + row_j + col_k on the stored entries, same storage"""
    if scipy.sparse.issparse(log_values):
        csr = scipy.sparse.csr_array(log_values, dtype=numpy.float64)
        rows = numpy.repeat(numpy.arange(csr.shape[0]), numpy.diff(csr.indptr))
        data = csr.data + row[rows] + col[csr.indices]
        return scipy.sparse.csr_array((data, csr.indices.copy(), csr.indptr.copy()), shape=csr.shape)
    return numpy.asarray(log_values, dtype=numpy.float64) + row[:, None] + col[None, :]


@dataclass(frozen=True, eq=False)
class ScalingState:
    """Multiplicative scalings (u_check, v_check); zero only where the target mass is zero."""

    u_check: FArray
    v_check: FArray

    def __post_init__(self) -> None:
        for name in ("u_check", "v_check"):
            vec = numpy.array(getattr(self, name), dtype=numpy.float64).ravel()
            if not numpy.all(numpy.isfinite(vec)) or numpy.any(vec < 0):
                raise DomainError(f"{name} must be finite and nonnegative")
            vec.setflags(write=False)
            object.__setattr__(self, name, vec)


@dataclass(frozen=True)
class SinkhornConfig:
    """
    s_max: sweep cap per solve
    feas_tol: stop once the row-marginal violation is below this value
    underflow_floor: smallest admissible scaling denominator
    """

    s_max: int = 20
    feas_tol: float = 1e-6
    underflow_floor: float = 1e-300

    def __post_init__(self) -> None:
        if self.s_max < 1:
            raise DomainError("s_max must be at least 1")
        if not self.feas_tol > 0:
            raise DomainError("feas_tol must be positive")
        if not self.underflow_floor > 0:
            raise DomainError("underflow_floor must be positive")


@dataclass(frozen=True)
class SinkhornStatus:
    converged: bool
    sweeps: int
    violation: float


def dual_objective(u: FArray, v: FArray, lam: float, K: KernelMatrix, a: Marginal, b: Marginal) -> float:
    """
    Purpose: dual function q(u, v) = lam exp(u/lam)^T K exp(v/lam) - u^T a - v^T b
    Input:
        -- u, v: dual potentials of length m and n
        -- lam: positive regularization parameter
        -- K: kernel
        -- a, b: marginals
    Output:
        -- q(u, v); raises NumericalError if exp(u/lam) or exp(v/lam) overflows
    """
    if not lam > 0:
        raise DomainError("the regularization parameter must be positive")
    u = numpy.asarray(u, dtype=numpy.float64)
    v = numpy.asarray(v, dtype=numpy.float64)
    if (u.size, v.size) != K.shape or K.shape != (a.length, b.length):
        raise DomainError(f"shapes do not match: u {u.size}, v {v.size}, kernel {K.shape}")
    largest = max(float(numpy.max(u)), float(numpy.max(v))) / lam
    if largest > _MAX_EXPONENT:
        raise NumericalError(f"exp overflow in the dual objective (max exponent {largest:.6g})")
    eu = numpy.exp(u / lam)
    ev = numpy.exp(v / lam)
    value = lam * float(eu @ K.matvec(ev)) - float(u @ a.masses) - float(v @ b.masses)
    if not numpy.isfinite(value):
        raise NumericalError(f"dual objective is not finite (max exponent {largest:.6g})")
    return value


def _scale(target: FArray, denominator: FArray, floor: float, side: str) -> FArray:
    """target / denominator where the target is positive, 0 elsewhere"""
    positive = target > 0
    starved = positive & (denominator <= floor)
    if numpy.any(starved):
        raise InfeasibleSubproblemError(
            f"{side} scaling denominator below {floor:.1e} at {int(starved.sum())} atoms with positive mass; "
            "the kernel support admits no feasible plan"
        )
    out = numpy.zeros_like(target)
    out[positive] = target[positive] / denominator[positive]
    if not numpy.all(numpy.isfinite(out)) or numpy.max(out, initial=0.0) > 1.0 / floor:
        raise InfeasibleSubproblemError(f"{side} scaling diverged past 1/{floor:.1e}")
    return out


def sinkhorn_solve(
    K: KernelMatrix,
    a: Marginal,
    b: Marginal,
    cfg: SinkhornConfig | None = None,
    warm: ScalingState | None = None,
) -> tuple[ScalingState, SinkhornStatus]:
    """
    Purpose: scaling solve of the entropic subproblem for kernel K and marginals (a, b)
    Input:
        -- K: dense or csr kernel
        -- a, b: marginals
        -- cfg: sweep cap and tolerances
        -- warm: starting scalings (all-ones if None)
    Output:
        -- (final scalings, status)
    """
    cfg = cfg or SinkhornConfig()
    m, n = a.length, b.length
    if K.shape != (m, n):
        raise DomainError(f"kernel has shape {K.shape}, marginals need {(m, n)}")
    if warm is None:
        v = numpy.ones(n)
    else:
        if (warm.u_check.size, warm.v_check.size) != (m, n):
            raise DomainError("warm-start scalings do not match the kernel shape")
        v = numpy.array(warm.v_check)
        v[(v <= 0) & (b.masses > 0)] = 1.0
    a_m, b_m = a.masses, b.masses
    floor = cfg.underflow_floor

    u = numpy.ones(m)
    violation = numpy.inf
    sweeps = 0
    for sweeps in range(1, cfg.s_max + 1):
        u = _scale(a_m, K.matvec(v), floor, "row")
        v = _scale(b_m, K.rmatvec(u), floor, "column")
        violation = float(numpy.max(numpy.abs(u * K.matvec(v) - a_m)))
        if violation <= cfg.feas_tol:
            break
    status = SinkhornStatus(converged=violation <= cfg.feas_tol, sweeps=sweeps, violation=violation)
    logger.debug("sinkhorn %dx%d: %d sweeps, violation %.3e", m, n, sweeps, violation)
    return ScalingState(u, v), status


def recover_plan(
    state: ScalingState,
    K: KernelMatrix,
    a: Marginal | None = None,
    b: Marginal | None = None,
) -> Plan:
    """Primal plan Diag(u_check) K Diag(v_check); its zero pattern contains that of K."""
    if (state.u_check.size, state.v_check.size) != K.shape:
        raise DomainError("scalings do not match the kernel shape")
    return Plan(K.scaled(state.u_check, state.v_check), a, b)


def to_dual_potentials(state: ScalingState, lam: float) -> tuple[FArray, FArray]:
    """u = lam log u_check, v = lam log v_check"""
    if not lam > 0:
        raise DomainError("the regularization parameter must be positive")
    if numpy.any(state.u_check <= 0) or numpy.any(state.v_check <= 0):
        raise DomainError("dual potentials need strictly positive scalings")
    return lam * numpy.log(state.u_check), lam * numpy.log(state.v_check)


# scalings beyond this range are folded into the offsets
ABSORB_ABOVE: float = 1e50


def _fold(offset: FArray, scaling: FArray, lam: float) -> FArray:
    positive = scaling > 0
    out = numpy.array(offset)
    out[positive] += lam * numpy.log(scaling[positive])
    return out


def _needs_absorb(*scalings: FArray) -> bool:
    for vec in scalings:
        positive = vec[vec > 0]
        if positive.size and (numpy.max(positive) > ABSORB_ABOVE or numpy.min(positive) < 1.0 / ABSORB_ABOVE):
            return True
    return False


def _rebuild(
    log_values: Matrix, lam: float, s: FArray, q: FArray, a: Marginal, b: Marginal
) -> tuple[KernelMatrix, FArray, FArray]:
    """exp(log_values + (s_j + q_k)/lam); lines without mass are rescaled to a largest entry of 1"""
    shifted = shift_log_kernel(log_values, s / lam, q / lam)
    if numpy.any(b.masses == 0):
        q = numpy.where(b.masses == 0, q - lam * _log_maxima(shifted)[1], q)
        shifted = shift_log_kernel(log_values, s / lam, q / lam)
    if numpy.any(a.masses == 0):
        s = numpy.where(a.masses == 0, s - lam * _log_maxima(shifted)[0], s)
        shifted = shift_log_kernel(log_values, s / lam, q / lam)
    return KernelMatrix(_exp_entries(shifted)), s, q


def sinkhorn_solve_stabilized(
    log_values: Matrix,
    lam: float,
    a: Marginal,
    b: Marginal,
    cfg: SinkhornConfig | None = None,
    warm: tuple[FArray, FArray] | None = None,
) -> tuple[KernelMatrix, ScalingState, tuple[FArray, FArray], SinkhornStatus]:
    """
    Purpose: sinkhorn_solve for the kernel exp(log_values) with offsets absorbed into the potentials
    Input:
        -- log_values: dense or csr log-kernel (-inf for zero entries)
        -- lam: regularization parameter, converts log scalings to potentials
        -- a, b: marginals
        -- cfg: sweep cap and tolerances
        -- warm: starting dual potentials (u, v) in cost units
    Output:
        -- (kernel, scalings, (s, q), status); the plan is kernel.scaled(u_check, v_check) and the
           dual potentials are lam log u_check + s, lam log v_check + q
    """
    cfg = cfg or SinkhornConfig()
    m, n = a.length, b.length
    if tuple(log_values.shape) != (m, n):
        raise DomainError(f"kernel has shape {tuple(log_values.shape)}, marginals need {(m, n)}")
    if warm is None:
        kernel, s, q = stabilized_kernel(log_values, lam)
        v = numpy.ones(n)
    else:
        u0, v0 = (numpy.asarray(x, dtype=numpy.float64) for x in warm)
        if (u0.size, v0.size) != (m, n) or not (numpy.all(numpy.isfinite(u0)) and numpy.all(numpy.isfinite(v0))):
            raise DomainError("warm-start potentials must be finite and match the kernel shape")
        kernel, s_fix, q_fix = stabilized_kernel(shift_log_kernel(log_values, u0 / lam, v0 / lam), lam)
        s, q = u0 + s_fix, v0 + q_fix
        # v_check that reproduces v0 under the new offsets
        v = numpy.exp(numpy.clip(-q_fix / lam, -700.0, 0.0))
    a_m, b_m = a.masses, b.masses
    floor = cfg.underflow_floor

    u = numpy.ones(m)
    violation = numpy.inf
    sweeps = absorptions = 0
    for sweeps in range(1, cfg.s_max + 1):
        u = _scale(a_m, kernel.matvec(v), floor, "row")
        v = _scale(b_m, kernel.rmatvec(u), floor, "column")
        violation = float(numpy.max(numpy.abs(u * kernel.matvec(v) - a_m)))
        if violation <= cfg.feas_tol:
            break
        if _needs_absorb(u, v):
            s, q = _fold(s, u, lam), _fold(q, v, lam)
            kernel, s, q = _rebuild(log_values, lam, s, q, a, b)
            u, v = (u > 0).astype(numpy.float64), (v > 0).astype(numpy.float64)
            absorptions += 1
    status = SinkhornStatus(converged=violation <= cfg.feas_tol, sweeps=sweeps, violation=violation)
    logger.debug(
        "stabilized sinkhorn %dx%d: %d sweeps, %d absorptions, violation %.3e", m, n, sweeps, absorptions, violation
    )
    return kernel, ScalingState(u, v), (s, q), status
