import itertools

import numpy as np
import pytest
import scipy.optimize
import scipy.sparse
from numpy.typing import NDArray
from pytest import approx

from eralm.core import (
    DomainError,
    Marginal,
    NumericalError,
    ObjectiveOracle,
    Plan,
    diameter_bound,
    gather_entries,
    kl_divergence,
    marginal_violation,
    neg_entropy,
    read_marginal,
    read_plan,
    residual,
    transport_lp,
    write_marginal,
    write_plan,
)
from eralm.sinkhorn import KernelMatrix, SinkhornConfig, recover_plan, sinkhorn_solve

FArray = NDArray[np.float64]

rng = np.random.default_rng(20240501)


def random_marginals(m: int, n: int, generator: np.random.Generator) -> tuple[Marginal, Marginal]:
    a = generator.random(m) + 0.1
    b = generator.random(n) + 0.1
    return Marginal(a / a.sum()), Marginal(b / b.sum())


def test_marginal_rejects_negative_mass():
    """A marginal with a negative entry is a domain error"""
    with pytest.raises(DomainError):
        Marginal(np.array([0.5, -0.1, 0.6]))


def test_marginal_is_read_only_copy():
    """The stored masses are a copy that cannot be written to"""
    masses = np.array([0.25, 0.75])
    marginal = Marginal(masses)
    masses[0] = 10.0
    assert marginal.masses[0] == 0.25
    with pytest.raises(ValueError):
        marginal.masses[0] = 1.0
    assert len(marginal) == 2
    assert marginal.total == approx(1.0)


def test_plan_rejects_target_of_wrong_length():
    """Plan targets must match the plan shape"""
    with pytest.raises(DomainError):
        Plan(np.ones((2, 3)), Marginal(np.ones(3)), None)


def test_plan_support_is_row_major():
    """support() lists the nonzero indices sorted by row then column"""
    plan = Plan.from_support(np.array([2, 0, 0]), np.array([1, 2, 0]), np.array([0.3, 0.2, 0.5]), (3, 3))
    rows, cols = plan.support()
    assert rows.tolist() == [0, 0, 2]
    assert cols.tolist() == [0, 2, 1]
    assert plan.is_sparse
    assert plan.nnz == 3


def test_gather_entries_reads_absent_sparse_entries_as_zero():
    """Entries outside a csr pattern read as 0"""
    values = scipy.sparse.csr_array(np.array([[1.0, 0.0], [0.0, 2.0]]))
    got = gather_entries(values, np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]))
    assert got.tolist() == [1.0, 0.0, 0.0, 2.0]


def test_neg_entropy_known_value():
    """h(T) = sum t (log t - 1) with 0 log 0 = 0"""
    T = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert neg_entropy(T) == approx(np.log(0.5) - 1.0)
    assert neg_entropy(scipy.sparse.csr_array(T)) == approx(np.log(0.5) - 1.0)


def test_kl_divergence_zero_on_equal_and_infinite_off_support():
    """KL(T; T) = 0, and mass on a zero of the reference gives +inf"""
    T = np.array([[0.2, 0.3], [0.1, 0.4]])
    assert kl_divergence(T, T) == approx(0.0, abs=1e-15)
    reference = np.array([[0.5, 0.0], [0.1, 0.4]])
    assert kl_divergence(T, reference) == np.inf

def test_neg_entropy_bounds_on_unit_mass():
    """h(a b^T) <= h(T) <= -1 for every T in U(a, b) with unit mass"""
    local = np.random.default_rng(11)
    cfg = SinkhornConfig(s_max=10_000, feas_tol=1e-12)
    for _ in range(20):
        m, n = int(local.integers(1, 7)), int(local.integers(1, 7))
        a, b = random_marginals(m, n, local)
        kernel = KernelMatrix(local.random((m, n)) ** 4)
        state, status = sinkhorn_solve(kernel, a, b, cfg)
        assert status.converged
        T = recover_plan(state, kernel, a, b)
        lower = neg_entropy(np.outer(a.masses, b.masses))
        assert lower - 1e-10 <= neg_entropy(T) <= -1.0 + 1e-12


def test_kl_divergence_is_nonnegative():
    """KL(T; T') >= 0 on random nonnegative pairs, with equality only at T = T'"""
    local = np.random.default_rng(12)
    for _ in range(50):
        shape = (int(local.integers(1, 6)), int(local.integers(1, 6)))
        T = local.random(shape)
        T_ref = local.random(shape) + 1e-3
        assert kl_divergence(T, T_ref) >= 0.0
        assert kl_divergence(T_ref, T_ref) == approx(0.0, abs=1e-14)
    T = np.array([[0.0, 0.5], [0.25, 0.0]])
    assert kl_divergence(T, np.full((2, 2), 0.2)) > 0.0



def test_diameter_bound():
    """d = min(sqrt(m) |a|_inf, sqrt(n) |b|_inf)"""
    a = Marginal(np.array([0.5, 0.5]))
    b = Marginal(np.array([0.25, 0.25, 0.25, 0.25]))
    assert diameter_bound(a, b) == approx(min(np.sqrt(2) * 0.5, 2 * 0.25))


def test_diameter_bound_rejects_mass_mismatch():
    """Marginals of different total mass span no transport polytope"""
    with pytest.raises(DomainError):
        diameter_bound(Marginal(np.array([1.0, 1.0])), Marginal(np.array([1.0])))


def test_transport_lp_matches_permutation_enumeration():
    """With uniform 3x3 marginals the vertices are scaled permutation matrices"""
    uniform = Marginal(np.full(3, 1.0 / 3.0))
    for _ in range(20):
        W = rng.random((3, 3))
        best = min(sum(W[j, s[j]] for j in range(3)) / 3.0 for s in itertools.permutations(range(3)))
        plan, value = transport_lp(W, uniform, uniform)
        assert value == approx(best, rel=1e-12)
        assert marginal_violation(plan) <= 1e-14


def test_transport_lp_matches_linprog():
    """The transportation simplex agrees with scipy's LP solver on random instances"""
    for m, n in [(1, 5), (4, 4), (6, 9), (9, 3)]:
        a, b = random_marginals(m, n, rng)
        W = rng.random((m, n))
        A_eq = np.vstack([np.kron(np.eye(m), np.ones((1, n))), np.kron(np.ones((1, m)), np.eye(n))])
        b_eq = np.concatenate([a.masses, b.masses])
        reference = scipy.optimize.linprog(W.ravel(), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
        plan, value = transport_lp(W, a, b)
        assert value == approx(reference.fun, rel=1e-9, abs=1e-12)
        assert marginal_violation(plan) <= 1e-12
        assert plan.toarray().min() >= 0.0


def test_transport_lp_degenerate_identity():
    """A degenerate problem whose optimum is the scaled identity"""
    W = 1.0 - np.eye(5)
    uniform = Marginal(np.full(5, 0.2))
    plan, value = transport_lp(W, uniform, uniform)
    assert value == approx(0.0, abs=1e-14)
    assert plan.toarray() == approx(0.2 * np.eye(5), abs=1e-14)


def test_transport_lp_pivot_cap():
    """Exhausting the pivot budget is a numerical error"""
    uniform = Marginal(np.full(3, 1.0 / 3.0))
    # the north-west corner start is the costly diagonal
    with pytest.raises(NumericalError):
        transport_lp(np.eye(3), uniform, uniform, max_pivots=0)
    _, value = transport_lp(np.eye(3), uniform, uniform)
    assert value == approx(0.0, abs=1e-14)

def test_transport_lp_lies_below_feasible_plans():
    """The LP value never exceeds <W, T> for T in U(a, b)"""
    local = np.random.default_rng(13)
    cfg = SinkhornConfig(s_max=10_000, feas_tol=1e-12)
    for _ in range(30):
        m, n = int(local.integers(1, 8)), int(local.integers(1, 8))
        a, b = random_marginals(m, n, local)
        W = local.random((m, n))
        _, value = transport_lp(W, a, b)
        kernel = KernelMatrix(local.random((m, n)) + 1e-2)
        state, status = sinkhorn_solve(kernel, a, b, cfg)
        assert status.converged
        T = recover_plan(state, kernel, a, b)
        assert value <= float(np.sum(W * T.toarray())) + 1e-12



def test_entropic_error_sandwich():
    """0 <= <W, T_lam> - <W, T_LP> <= -lam h(a b^T) on random small instances"""
    local = np.random.default_rng(7)
    cfg = SinkhornConfig(s_max=200_000, feas_tol=1e-11)
    for trial in range(100):
        m, n = int(local.integers(1, 9)), int(local.integers(1, 9))
        lam = (1e-1, 1e-2)[trial % 2]
        a, b = random_marginals(m, n, local)
        W = local.random((m, n))
        kernel = KernelMatrix(np.exp(-(W - W.min()) / lam))
        state, status = sinkhorn_solve(kernel, a, b, cfg)
        assert status.converged
        T = recover_plan(state, kernel, a, b)
        _, lp_value = transport_lp(W, a, b)
        gap = float(np.sum(W * T.toarray())) - lp_value
        upper = -lam * neg_entropy(np.outer(a.masses, b.masses))
        assert -1e-8 <= gap <= upper + 1e-8


def test_residual_vanishes_at_linear_optimum():
    """R(X) = 0 at the LP optimum of a linear objective and positive elsewhere"""
    a, b = random_marginals(5, 4, rng)
    W = rng.random((5, 4))
    oracle = ObjectiveOracle(
        shapes=((5, 4),),
        objective_fn=lambda blocks: float(np.sum(W * np.asarray(blocks[0]))),
        gradient_fn=lambda i, blocks: W,
    )
    optimum, _ = transport_lp(W, a, b)
    per_block, total = residual([optimum], oracle)
    assert total == approx(0.0, abs=1e-12)
    product = Plan(np.outer(a.masses, b.masses), a, b)
    _, total = residual([product], oracle)
    assert total > 0


def test_residual_rejects_infeasible_block():
    """Residuals are only defined on the polytope"""
    a, b = random_marginals(3, 3, rng)
    oracle = ObjectiveOracle(((3, 3),), lambda blocks: 0.0, lambda i, blocks: np.zeros((3, 3)))
    with pytest.raises(DomainError):
        residual([Plan(np.eye(3), a, b)], oracle)

def test_residual_ignores_row_and_column_constants():
    """Adding u 1^T + 1 v^T to the gradient leaves R(X) unchanged on the polytope"""
    a, b = random_marginals(5, 6, rng)
    W = rng.random((5, 6))
    shift = W + rng.normal(size=5)[:, None] + rng.normal(size=6)[None, :] + 3.0
    plain = ObjectiveOracle(((5, 6),), lambda blocks: 0.0, lambda i, blocks: W)
    shifted = ObjectiveOracle(((5, 6),), lambda blocks: 0.0, lambda i, blocks: shift)
    X = Plan(np.outer(a.masses, b.masses), a, b)
    _, expected = residual([X], plain)
    _, got = residual([X], shifted)
    assert got == approx(expected, abs=1e-9)
    assert expected > 0



def test_plan_and_marginal_files(tmp_path):
    """Plans and marginals survive the coordinate text format bit for bit"""
    a, b = random_marginals(4, 3, rng)
    values = np.outer(a.masses, b.masses)
    values[1, 2] = 0.0
    write_plan(tmp_path / "plan.txt", values)
    plan = read_plan(tmp_path / "plan.txt", a, b)
    assert plan.shape == (4, 3)
    assert plan.nnz == 11
    assert np.array_equal(plan.toarray(), values)
    write_marginal(tmp_path / "a.txt", a)
    assert np.array_equal(read_marginal(tmp_path / "a.txt").masses, a.masses)
