import numpy as np
import pytest
import scipy.optimize
import scipy.sparse
from pytest import approx

from eralm import sinkhorn as sinkhorn_module
from eralm.core import DomainError, InfeasibleSubproblemError, Marginal, NumericalError, marginal_violation
from eralm.sinkhorn import (
    KernelMatrix,
    ScalingState,
    SinkhornConfig,
    dual_objective,
    recover_plan,
    sinkhorn_solve,
    sinkhorn_solve_stabilized,
    stabilized_kernel,
    to_dual_potentials,
)

rng = np.random.default_rng(11)


def random_marginal(n: int) -> Marginal:
    x = rng.random(n) + 0.05
    return Marginal(x / x.sum())


def test_random_instances_reach_feasibility():
    """50x50 entropic transport problems converge to a marginal violation below 1e-6"""
    cfg = SinkhornConfig(s_max=10_000, feas_tol=1e-6)
    lam = 0.1
    for _ in range(5):
        a, b = random_marginal(50), random_marginal(50)
        C = rng.random((50, 50))
        kernel = KernelMatrix(np.exp(-C / lam))
        state, status = sinkhorn_solve(kernel, a, b, cfg)
        plan = recover_plan(state, kernel, a, b)
        assert status.converged
        assert marginal_violation(plan) <= 1e-6
        # column sums are exact after the final v-update
        assert plan.col_sums() == approx(b.masses, abs=1e-14)


def test_scalings_minimize_the_dual():
    """The Sinkhorn fixed point agrees with a BFGS minimization of the dual function"""
    lam = 0.5
    a, b = random_marginal(5), random_marginal(6)
    C = rng.random((5, 6))
    kernel = KernelMatrix(np.exp(-C / lam))
    state, status = sinkhorn_solve(kernel, a, b, SinkhornConfig(s_max=10_000, feas_tol=1e-12))
    assert status.converged
    u, v = to_dual_potentials(state, lam)

    def q(z):
        return dual_objective(z[:5], z[5:], lam, kernel, a, b)

    def grad(z):
        eu, ev = np.exp(z[:5] / lam), np.exp(z[5:] / lam)
        return np.concatenate([eu * kernel.matvec(ev) - a.masses, ev * kernel.rmatvec(eu) - b.masses])

    result = scipy.optimize.minimize(q, np.zeros(11), jac=grad, method="BFGS", options={"gtol": 1e-10})
    assert q(np.concatenate([u, v])) == approx(result.fun, abs=1e-8)
    assert grad(np.concatenate([u, v])) == approx(np.zeros(11), abs=1e-10)

def test_dual_objective_decreases_over_sweeps():
    """Each sweep minimizes q exactly in u then in v, so q never increases"""
    lam = 0.05
    a, b = random_marginal(10), random_marginal(12)
    kernel = KernelMatrix(np.exp(-rng.random((10, 12)) / lam))
    values = []
    for s_max in range(1, 31):
        state, _ = sinkhorn_solve(kernel, a, b, SinkhornConfig(s_max=s_max, feas_tol=1e-15))
        values.append(dual_objective(*to_dual_potentials(state, lam), lam, kernel, a, b))
    assert np.all(np.diff(values) <= 1e-10)
    assert values[-1] < values[0]



def test_sparse_kernel_keeps_zero_pattern():
    """A csr kernel gives a csr plan inside the kernel's pattern"""
    dense = np.exp(-rng.random((6, 6)))
    mask = (rng.random((6, 6)) < 0.5) | np.eye(6, dtype=bool)
    kernel = KernelMatrix(scipy.sparse.csr_array(dense * mask))
    uniform = Marginal(np.full(6, 1.0 / 6.0))
    state, status = sinkhorn_solve(kernel, uniform, uniform, SinkhornConfig(s_max=10_000))
    plan = recover_plan(state, kernel, uniform, uniform)
    assert plan.is_sparse
    assert np.all(plan.toarray()[~mask] == 0.0)
    assert status.converged


def test_empty_row_is_infeasible():
    """A row of the kernel without entries cannot carry positive mass"""
    values = np.ones((3, 3))
    values[1, :] = 0.0
    kernel = KernelMatrix(scipy.sparse.csr_array(values))
    uniform = Marginal(np.full(3, 1.0 / 3.0))
    with pytest.raises(InfeasibleSubproblemError):
        sinkhorn_solve(kernel, uniform, uniform)


def test_zero_mass_atoms_get_zero_scaling():
    """Rows without target mass carry no mass in the plan"""
    a = Marginal(np.array([0.5, 0.0, 0.5]))
    b = Marginal(np.array([0.25, 0.75]))
    kernel = KernelMatrix(np.ones((3, 2)))
    state, _ = sinkhorn_solve(kernel, a, b, SinkhornConfig(s_max=100))
    assert state.u_check[1] == 0.0
    assert recover_plan(state, kernel, a, b).row_sums() == approx(a.masses)


def test_warm_start_from_fixed_point():
    """Restarting from converged scalings finishes in a single sweep"""
    a, b = random_marginal(8), random_marginal(8)
    kernel = KernelMatrix(np.exp(-rng.random((8, 8)) / 0.2))
    cfg = SinkhornConfig(s_max=10_000, feas_tol=1e-9)
    state, _ = sinkhorn_solve(kernel, a, b, cfg)
    again, status = sinkhorn_solve(kernel, a, b, cfg, warm=state)
    assert status.sweeps == 1
    assert again.v_check == approx(state.v_check, rel=1e-6)


def test_sweep_cap_reports_non_convergence():
    """Hitting s_max is reported in the status, not raised"""
    a, b = random_marginal(10), random_marginal(10)
    kernel = KernelMatrix(np.exp(-rng.random((10, 10)) / 0.01))
    _, status = sinkhorn_solve(kernel, a, b, SinkhornConfig(s_max=1, feas_tol=1e-14))
    assert not status.converged
    assert status.sweeps == 1


def test_dual_objective_overflow():
    """exp(u / lam) beyond the double range is a numerical error"""
    uniform = Marginal(np.full(2, 0.5))
    kernel = KernelMatrix(np.ones((2, 2)))
    with pytest.raises(NumericalError):
        dual_objective(np.array([800.0, 0.0]), np.zeros(2), 1.0, kernel, uniform, uniform)


def test_invalid_inputs():
    """Negative kernels, negative scalings and shape mismatches are domain errors"""
    with pytest.raises(DomainError):
        KernelMatrix(np.array([[1.0, -1.0]]))
    with pytest.raises(DomainError):
        ScalingState(np.array([1.0, -0.5]), np.ones(2))
    with pytest.raises(DomainError):
        sinkhorn_solve(KernelMatrix(np.ones((2, 3))), Marginal(np.ones(2)), Marginal(np.ones(2)))
    with pytest.raises(DomainError):
        SinkhornConfig(s_max=0)


def test_stabilized_kernel_factors():
    """exp(L) = Diag(exp(-s/lam)) K Diag(exp(-q/lam)) with a unit maximum in every row and column"""
    lam = 0.3
    logs = rng.normal(size=(6, 7)) * 5.0
    logs[2, 3] = -np.inf
    kernel, s, q = stabilized_kernel(logs, lam)
    values = np.asarray(kernel.values)
    assert values.max(axis=1) == approx(np.ones(6))
    assert values.max(axis=0) == approx(np.ones(7))
    rebuilt = np.exp(-s / lam)[:, None] * values * np.exp(-q / lam)[None, :]
    assert rebuilt == approx(np.exp(logs), rel=1e-12)
    assert values[2, 3] == 0.0

    sparse, s_sparse, q_sparse = stabilized_kernel(scipy.sparse.csr_array(logs), lam)
    assert sparse.values.toarray() == approx(values, rel=1e-12)
    assert s_sparse == approx(s) and q_sparse == approx(q)


def test_stabilized_solve_survives_underflow():
    """Costs whose plain Gibbs kernel underflows to zero still give a feasible plan and its potentials"""
    lam = 0.05
    a, b = random_marginal(8), random_marginal(8)
    C = 40.0 + 5.0 * rng.random((8, 8))
    assert np.exp(-C / lam).max() == 0.0
    cfg = SinkhornConfig(s_max=200_000, feas_tol=1e-9)
    kernel, state, (s, q), status = sinkhorn_solve_stabilized(-C / lam, lam, a, b, cfg)
    assert status.converged
    assert marginal_violation(recover_plan(state, kernel, a, b)) <= 1e-9
    u, v = to_dual_potentials(state, lam)
    plan = np.exp((u[:, None] + s[:, None] + v[None, :] + q[None, :] - C) / lam)
    assert plan.sum(axis=1) == approx(a.masses, rel=1e-6)
    assert plan.sum(axis=0) == approx(b.masses, rel=1e-10)


def test_absorbing_scalings_keeps_the_iterates(monkeypatch):
    """Folding the scalings into the offsets after every sweep changes neither the plan nor the potentials"""
    lam = 0.2
    a = Marginal(np.array([0.3, 0.0, 0.2, 0.5]))
    b = Marginal(np.array([0.25, 0.25, 0.5, 0.0, 0.0]))
    logs = -rng.random((4, 5)) / lam
    logs[0, 4] = -np.inf
    cfg = SinkhornConfig(s_max=40, feas_tol=1e-14)
    kernel, state, (s, q), _ = sinkhorn_solve_stabilized(logs, lam, a, b, cfg)
    monkeypatch.setattr(sinkhorn_module, "ABSORB_ABOVE", 1.0 + 1e-9)
    folded_kernel, folded, (s2, q2), _ = sinkhorn_solve_stabilized(logs, lam, a, b, cfg)
    plan = kernel.scaled(state.u_check, state.v_check)
    assert folded_kernel.scaled(folded.u_check, folded.v_check) == approx(plan, rel=1e-9, abs=1e-15)
    live_u, live_v = a.masses > 0, b.masses > 0
    u = lam * np.log(state.u_check[live_u]) + s[live_u]
    u2 = lam * np.log(folded.u_check[live_u]) + s2[live_u]
    assert u2 == approx(u, rel=1e-9)
    v = lam * np.log(state.v_check[live_v]) + q[live_v]
    v2 = lam * np.log(folded.v_check[live_v]) + q2[live_v]
    assert v2 == approx(v, rel=1e-9)


def test_stabilized_warm_start_from_potentials():
    """Restarting from converged potentials finishes in a single sweep"""
    lam = 0.2
    a, b = random_marginal(8), random_marginal(8)
    logs = -rng.random((8, 8)) / lam
    cfg = SinkhornConfig(s_max=10_000, feas_tol=1e-9)
    _, state, (s, q), _ = sinkhorn_solve_stabilized(logs, lam, a, b, cfg)
    u, v = to_dual_potentials(state, lam)
    _, _, _, status = sinkhorn_solve_stabilized(logs, lam, a, b, cfg, warm=(u + s, v + q))
    assert status.sweeps == 1
    assert status.converged


def test_stabilized_kernel_rejects_bad_input():
    """+inf or nan log entries and a nonpositive parameter are domain errors"""
    with pytest.raises(DomainError):
        stabilized_kernel(np.array([[0.0, np.inf]]), 1.0)
    with pytest.raises(DomainError):
        stabilized_kernel(np.array([[0.0, np.nan]]), 1.0)
    with pytest.raises(DomainError):
        stabilized_kernel(np.zeros((2, 2)), 0.0)
