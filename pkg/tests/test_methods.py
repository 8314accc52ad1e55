import logging

import numpy as np
import pytest
from pytest import approx

from eralm.core import (
    DomainError,
    InfeasibleSubproblemError,
    Marginal,
    ObjectiveOracle,
    TheoryBound,
    marginal_violation,
    residual,
)
from eralm.methods import (
    PARAMETER_FLOOR,
    TRACE_COLUMNS,
    TRACE_SCHEMA,
    MethodConfig,
    StepRule,
    adaptive_parameter,
    default_tolerance,
    delta_metric,
    random_initial_plans,
    run_eralm,
    run_klalm,
    run_method,
    run_s_eralm,
    run_s_klalm,
    step_size,
    theorem1_bound,
    theoretical_step,
)
from eralm.mmot import build_mesh, discretize, get_system, mmot_oracle
from eralm.sinkhorn import SinkhornConfig

# Synthetic bilinear two-block problem
#     f(X1, X2) = <A1, X1> + <A2, X2> + <X1, B X2>
# with gradients A1 + B X2 and A2 + B^T X1; the gradient is |B|_2-Lipschitz and f >= 0.
m = 10
rng = np.random.default_rng(42)
A1 = 0.1 * rng.random((m, m))
A2 = 0.1 * rng.random((m, m))
B = rng.random((m, m))
uniform = Marginal(np.full(m, 1.0 / m))
marginals = [(uniform, uniform), (uniform, uniform)]


def bilinear_objective(blocks):
    X1, X2 = (np.asarray(x.toarray() if hasattr(x, "toarray") else x) for x in blocks)
    return float(np.sum(A1 * X1) + np.sum(A2 * X2) + np.sum(X1 * (B @ X2)))


def bilinear_gradient(i, blocks):
    X1, X2 = (np.asarray(x.toarray() if hasattr(x, "toarray") else x) for x in blocks)
    return A1 + B @ X2 if i == 0 else A2 + B.T @ X1


oracle = ObjectiveOracle(((m, m), (m, m)), bilinear_objective, bilinear_gradient)
initial = random_initial_plans(marginals, seed=1)


def test_step_rules():
    """Power-decay and constant step sizes"""
    rule = StepRule()
    assert step_size(0, rule) == 1.0
    assert step_size(3, rule) == approx(4.0**-0.75)
    assert step_size(5, StepRule(kind="constant", value=0.25)) == 0.25
    with pytest.raises(DomainError):
        StepRule(kind="constant", value=1.5)
    with pytest.raises(DomainError):
        step_size(0, StepRule(kind="theoretical", lipschitz=1.0, f_lower=0.0))


def test_theoretical_step_floor():
    """t_max below the admissible floor is rejected"""
    assert 0 < theoretical_step(1.0, 0.5, 1.0, 2, 100) <= 1
    with pytest.raises(DomainError):
        theoretical_step(1.0, 100.0, 0.1, 1, 1)


def test_adaptive_parameter(caplog):
    """sigma |v|_inf / (20 log K), floored with a warning when degenerate"""
    assert adaptive_parameter(np.array([-3.0, 1.0]), 90, 2.0) == approx(2.0 * 3.0 / (20.0 * np.log(90)))
    with caplog.at_level(logging.WARNING):
        assert adaptive_parameter(np.zeros(4), 90, 1.0) == PARAMETER_FLOOR
    assert "floored" in caplog.text


def test_default_tolerance():
    """tol0 (sqrt 2^d)^log2(K / K0)"""
    assert default_tolerance(720, 90, 1e-3, 1) == approx(2.0 * np.sqrt(2.0) * 1e-3)
    assert default_tolerance(3600, 900, 5e-3, 2) == approx(2.0 * 2.0 * 5e-3)
    assert default_tolerance(90, 90, 5e-3, 3) == approx(5e-3)


def test_delta_metric():
    """Mean over blocks of the weighted Frobenius distance"""
    prev = [np.zeros((2, 2)), np.zeros((2, 2))]
    curr = [np.eye(2), 2.0 * np.eye(2)]
    assert delta_metric(prev, curr) == approx((np.sqrt(2) + np.sqrt(8)) / 2)
    assert delta_metric(prev, curr, weights=np.array([1.0, 0.0])) == approx((1.0 + 2.0) / 2)


def test_method_config_validation():
    """Unknown methods and out-of-range settings are domain errors"""
    with pytest.raises(DomainError):
        MethodConfig(kind="palm")
    with pytest.raises(DomainError):
        MethodConfig(gamma=1.5)
    assert MethodConfig(n_samples=None).samples_for(90) == int(np.floor(90**1.5))


def test_random_initial_plans_are_feasible():
    """The random start lies in the transport polytope and is strictly positive"""
    for plan in initial:
        assert marginal_violation(plan) <= 1e-10
        assert plan.toarray().min() > 0


def test_ergodic_residual_bound():
    """ERALM with the theoretical step stays below the ergodic residual bound"""
    lam = 1e-3
    t_max = 200
    L = float(np.linalg.norm(B, 2))
    cfg = MethodConfig(
        kind="eralm",
        tol=0.0,
        t_max=t_max,
        fixed_parameter=lam,
        step_rule=StepRule(kind="theoretical", lipschitz=L, f_lower=0.0),
        sinkhorn=SinkhornConfig(s_max=10_000, feas_tol=1e-10),
        record_objective=False,
    )
    residuals = []

    def on_iterate(t, plans):
        residuals.append(residual(plans, oracle, tol=1e-6)[1])

    run_eralm(oracle, marginals, cfg, initial, on_iterate=on_iterate)
    assert len(residuals) == t_max
    f0 = bilinear_objective([p.values for p in initial])
    tb = TheoryBound.from_marginals(marginals, L=L, f_lower=0.0, lam=lam, t_max=t_max)
    assert np.mean(residuals) <= theorem1_bound(tb, 2, t_max, f0) + 1e-8


def test_klalm_support_only_shrinks():
    """Zeros of a KLALM iterate stay zero over 100 iterations"""
    mask = (rng.random((m, m)) < 0.4) | np.eye(m, dtype=bool)
    start = random_initial_plans(marginals, seed=2)
    start_values = []
    for plan in start:
        values = plan.toarray() * mask
        # project the masked matrix back onto the polytope
        for _ in range(2000):
            values *= (uniform.masses / values.sum(axis=1))[:, None]
            values *= (uniform.masses / values.sum(axis=0))[None, :]
        start_values.append(values)
    supports = []

    def on_iterate(t, plans):
        supports.append([p.toarray() > 0 for p in plans])

    cfg = MethodConfig(kind="klalm", tol=0.0, t_max=100, record_objective=False)
    record = run_klalm(oracle, marginals, cfg, start_values, on_iterate=on_iterate)
    supports.append([p.toarray() > 0 for p in record.plans])
    violations = sum(
        int(np.any(later & ~earlier))
        for before, after in zip(supports[:-1], supports[1:])
        for earlier, later in zip(before, after)
    )
    assert violations == 0
    assert not np.any(supports[-1][0] & ~mask)


def test_eralm_decreases_objective():
    """ERALM with adaptive parameters improves on the random start"""
    cfg = MethodConfig(kind="eralm", tol=0.0, t_max=50, sinkhorn=SinkhornConfig(s_max=200))
    record = run_method(oracle, marginals, cfg, initial)
    assert record.final_objective < record.initial_objective
    assert record.stop_reason == "t_max"
    for plan in record.plans:
        assert marginal_violation(plan) <= 1e-3


def test_tolerance_stops_early():
    """A loose tolerance stops the loop before t_max"""
    cfg = MethodConfig(kind="klalm", tol=1.0, t_max=100)
    record = run_klalm(oracle, marginals, cfg, initial)
    assert record.stop_reason == "tol"
    assert len(record.iterations) < 100
    assert record.deltas[-1] <= 1.0


def test_sampled_eralm_is_deterministic():
    """Two S-ERALM runs with the same seed produce identical traces"""
    cfg = MethodConfig(kind="s-eralm", tol=0.0, t_max=10, seed=7, n_samples=200)
    first = run_s_eralm(oracle, marginals, cfg, initial)
    second = run_s_eralm(oracle, marginals, cfg, initial)
    assert np.array_equal(first.deltas, second.deltas)
    assert [r.support_sizes for r in first.iterations] == [r.support_sizes for r in second.iterations]


def test_sampled_klalm_freezes_support():
    """After t_hat every S-KLALM iterate lives on the frozen support"""
    cfg = MethodConfig(kind="s-klalm", tol=0.0, t_max=15, t_hat=3, seed=5, n_samples=400)
    record = run_s_klalm(oracle, marginals, cfg, initial)
    sizes = [r.support_sizes for r in record.iterations]
    assert sizes[3] == sizes[-1]
    for plan, support in zip(record.plans, record.supports):
        assert support is not None
        mask = np.zeros((m, m), dtype=bool)
        mask[support.rows, support.cols] = True
        assert not np.any((plan.toarray() > 0) & ~mask)

def test_sampled_eralm_with_certain_inclusion_is_eralm():
    """When every p* is 1 the sampled support is full and S-ERALM repeats ERALM"""
    common = dict(tol=0.0, t_max=8, seed=2, sinkhorn=SinkhornConfig(s_max=300))
    dense = run_eralm(oracle, marginals, MethodConfig(kind="eralm", **common), initial)
    sampled = run_s_eralm(oracle, marginals, MethodConfig(kind="s-eralm", n_samples=10**9, **common), initial)
    assert [r.support_sizes for r in sampled.iterations] == [(m * m, m * m)] * 8
    assert sampled.deltas == approx(dense.deltas, rel=1e-12)
    for X, Y in zip(sampled.plans, dense.plans):
        assert X.toarray() == approx(Y.toarray(), rel=1e-12, abs=1e-15)


def test_sampled_klalm_before_t_hat_is_klalm():
    """With t_hat >= t_max S-KLALM never draws a support and follows KLALM"""
    common = dict(tol=0.0, t_max=6, seed=4, sinkhorn=SinkhornConfig(s_max=300))
    dense = run_klalm(oracle, marginals, MethodConfig(kind="klalm", **common), initial)
    sampled = run_s_klalm(oracle, marginals, MethodConfig(kind="s-klalm", t_hat=6, **common), initial)
    assert sampled.supports == [None, None]
    assert sampled.deltas == approx(dense.deltas, rel=1e-12)
    for X, Y in zip(sampled.plans, dense.plans):
        assert X.toarray() == approx(Y.toarray(), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("kind", ["eralm", "s-eralm", "klalm", "s-klalm"])
def test_every_iterate_is_feasible(kind):
    """Each outer iterate handed to on_iterate satisfies its marginals"""
    sinkhorn = SinkhornConfig(s_max=2000, feas_tol=1e-9)
    cfg = MethodConfig(kind=kind, tol=0.0, t_max=6, seed=6, n_samples=400, sinkhorn=sinkhorn)
    violations = []
    record = run_method(
        oracle, marginals, cfg, initial, on_iterate=lambda t, X: violations.append(max(map(marginal_violation, X)))
    )
    violations.append(max(marginal_violation(plan) for plan in record.plans))
    assert len(violations) == 7
    assert max(violations) <= 1e-6



def test_infeasible_sample_raises_after_resample():
    """A support too sparse for the marginals is redrawn once, then reported"""
    cfg = MethodConfig(kind="s-eralm", tol=0.0, t_max=3, n_samples=1, gamma=0.0)
    with pytest.raises(InfeasibleSubproblemError):
        run_s_eralm(oracle, marginals, cfg, initial)


def test_trace_csv(tmp_path):
    """The trace is versioned and timing columns can be zeroed"""
    record = run_klalm(oracle, marginals, MethodConfig(kind="klalm", tol=0.0, t_max=4), initial)
    record.to_csv(tmp_path / "trace.csv", include_timing=False)
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == TRACE_SCHEMA
    assert lines[1] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 2 + 4
    assert lines[2].split(",")[-5:] == ["0.000"] * 5
    assert record.kernel_evaluations == 4 * 2 * m * m


# the bilinear problem with row constants far beyond the exp range added to block 1
row_offsets = 40.0 * np.arange(m, dtype=float)


def offset_gradient(i, blocks):
    grad = bilinear_gradient(i, blocks)
    return grad + row_offsets[:, None] if i == 0 else grad


offset_oracle = ObjectiveOracle(((m, m), (m, m)), bilinear_objective, offset_gradient)


@pytest.mark.parametrize("kind", ["eralm", "klalm"])
def test_row_constants_do_not_change_the_iterates(kind):
    """Row constants of the gradient leave the plans unchanged even when exp(-C/lam) underflows"""
    lam = 0.05
    assert np.exp(-row_offsets[-1] / lam) == 0.0
    sinkhorn = SinkhornConfig(s_max=3000, feas_tol=1e-15)
    cfg = MethodConfig(kind=kind, tol=0.0, t_max=6, fixed_parameter=lam, sinkhorn=sinkhorn)
    plain = run_method(oracle, marginals, cfg, initial)
    shifted = run_method(offset_oracle, marginals, cfg, initial)
    for p, q in zip(plain.plans, shifted.plans):
        assert q.toarray() == approx(p.toarray(), rel=1e-7, abs=1e-12)
    assert shifted.dual_u[0] - plain.dual_u[0] - row_offsets == approx(
        np.full(m, shifted.dual_u[0][0] - plain.dual_u[0][0]), abs=1e-6
    )


def test_klalm_on_coarse_system5():
    """KLALM on a 12 x 12 System 5 grid keeps finite, feasible iterates as the parameter shrinks"""
    density = get_system(5).density
    system = discretize(density, build_mesh(density, 144, "equisize"))
    cfg = MethodConfig(kind="klalm", tol=0.0, t_max=4, sinkhorn=SinkhornConfig(s_max=5000))
    record = run_klalm(mmot_oracle(system), system.marginals(), cfg, weights=system.lambda_inv)
    assert len(record.iterations) == 4
    assert np.isfinite(record.final_objective)
    for plan in record.plans:
        values = plan.toarray()
        assert np.all(np.isfinite(values)) and values.min() >= 0
        assert plan.col_sums() == approx(system.rho, rel=1e-9)
        assert marginal_violation(plan) <= 1e-3
    for u, v in zip(record.dual_u, record.dual_v):
        assert np.all(np.isfinite(u)) and np.all(np.isfinite(v))


def test_sampled_eralm_terminates_on_system1():
    """S-ERALM on System 1 with K = 12 reaches the tolerance without redrawing a support"""
    density = get_system(1).density
    system = discretize(density, build_mesh(density, 12))
    # n_s >= K^2 puts an index with p* = 1 in every row and column
    cfg = MethodConfig(kind="s-eralm", tol=0.1, t_max=400, n_samples=400, seed=3, sinkhorn=SinkhornConfig(s_max=500))
    record = run_s_eralm(mmot_oracle(system), system.marginals(), cfg, weights=system.lambda_inv)
    assert record.stop_reason == "tol"
    assert record.resamples == 0
    assert record.deltas[-1] <= 0.1
    for plan in record.plans:
        assert marginal_violation(plan) <= 1e-3
