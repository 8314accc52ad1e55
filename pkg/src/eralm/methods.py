# Outer loops of the entropic block coordinate methods
# ====================================================

# One outer iteration sweeps the blocks i = 1..N in order (Gauss-Seidel). Block i
# takes the gradient C_i = grad_i f(X) at the current iterate, builds a Gibbs
# kernel and solves the entropic subproblem over U(a_i, b_i) with Sinkhorn:

#     eralm     kernel exp(-C/lam)                 X <- (1 - alpha) X + alpha X~
#     s-eralm   exp(-C/lam) / p* on a fresh sample  X <- (1 - alpha) X + alpha X~
#     klalm     exp(-C/mu) * X                      X <- X~
#     s-klalm   as klalm, sparsified on a support drawn once at t = t_hat

# The regularization parameter follows sigma |v|_inf / (20 log K) with v the last
# dual potential of the block (sigma |C|_max / (20 log K) before the first solve).
# The loop stops once Delta = mean_i |Lambda^-1 (X_i^t - X_i^(t-1))|_F <= tol or
# after t_max iterations.

# Kernels are passed to Sinkhorn as logarithms (sinkhorn_solve_stabilized); the
# row and column factors of the rescaled kernel go into the dual potentials,
# which also warm-start the next solve of the block.


from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy
import scipy.sparse

from eralm.core import (
    DomainError,
    FArray,
    IArray,
    InfeasibleSubproblemError,
    Marginal,
    Matrix,
    ObjectiveOracle,
    Plan,
    TheoryBound,
    dense,
    diameter_bound,
    gather_entries,
)
from eralm.sinkhorn import (
    KernelMatrix,
    SinkhornConfig,
    recover_plan,
    sinkhorn_solve,
    sinkhorn_solve_stabilized,
)
from eralm.sparsify import (
    SampledSupport,
    mixture_probabilities,
    poisson_sample,
    sparsify_log_kernel,
)

logger = logging.getLogger(__name__)

METHOD_KINDS = ("eralm", "s-eralm", "klalm", "s-klalm")
STEP_KINDS = ("power_decay", "theoretical", "constant")

# floor of the adaptive regularization parameter
PARAMETER_FLOOR: float = 1e-12

TRACE_SCHEMA = "# eralm trace schema 1"
TRACE_COLUMNS = (
    "t",
    "delta",
    "objective",
    "support_total",
    "sinkhorn_sweeps",
    "wall_ms",
    "sampling_ms",
    "kernel_ms",
    "sinkhorn_ms",
    "gradient_ms",
)

MarginalPair = tuple[Marginal, Marginal]
IterateCallback = Callable[[int, Sequence[Plan]], None]


@dataclass(frozen=True)
class StepRule:
    """
    Step sizes of the convex ERALM update.

    power_decay: (t + 1)^-exponent
    theoretical: constant step of the ergodic residual bound, needs lipschitz and f_lower
    constant:    value
    """

    kind: str = "power_decay"
    exponent: float = 0.75
    lipschitz: float | None = None
    f_lower: float | None = None
    value: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in STEP_KINDS:
            raise DomainError(f"unknown step rule {self.kind!r}; choose from {STEP_KINDS}")
        if self.kind == "power_decay" and not self.exponent > 0:
            raise DomainError("the power-decay exponent must be positive")
        if self.kind == "theoretical" and (self.lipschitz is None or self.f_lower is None):
            raise DomainError("the theoretical step rule needs lipschitz and f_lower")
        if self.kind == "theoretical" and not self.lipschitz > 0:  # type: ignore[operator]
            raise DomainError("the theoretical step rule needs a positive Lipschitz constant")
        if self.kind == "constant" and (self.value is None or not 0 < self.value <= 1):
            raise DomainError("a constant step must lie in (0, 1]")

    def resolve(self, f0: float, d_bar: float, n_blocks: int, t_max: int) -> "StepRule":
        """Fix the theoretical step from f(X^0); other rules are returned unchanged."""
        if self.kind != "theoretical":
            return self
        assert self.lipschitz is not None and self.f_lower is not None
        alpha = theoretical_step(self.lipschitz, f0 - self.f_lower, d_bar, n_blocks, t_max)
        return dataclasses.replace(self, kind="constant", value=alpha)


def theoretical_step(L: float, f0_gap: float, d_bar: float, n_blocks: int, t_max: int) -> float:
    """
    Purpose: alpha = (1/d_bar) sqrt(f0_gap / (2 L N (2 sqrt(N) + 1) t_max))
    Output:
        -- alpha in (0, 1]; DomainError when t_max is below gap / (2 d_bar^2 L N (2 sqrt(N) + 1))
    """
    if f0_gap < 0:
        raise DomainError(f"f(X^0) lies below the given lower bound (gap {f0_gap:.3e})")
    if not (L > 0 and d_bar > 0 and n_blocks >= 1 and t_max >= 1):
        raise DomainError("the theoretical step needs L > 0, d_bar > 0, N >= 1 and t_max >= 1")
    spread = 2.0 * L * n_blocks * (2.0 * numpy.sqrt(n_blocks) + 1.0)
    t_floor = f0_gap / (d_bar**2 * spread)
    if t_max < t_floor:
        raise DomainError(f"t_max = {t_max} is below the admissible floor {t_floor:.6g} of the theoretical step")
    alpha = float(numpy.sqrt(f0_gap / (spread * t_max)) / d_bar)
    if alpha == 0.0:
        raise DomainError("theoretical step is zero: f(X^0) already attains the lower bound")
    return alpha


def step_size(t: int, rule: StepRule) -> float:
    """alpha^(t) of the convex update"""
    if t < 0:
        raise DomainError("iteration counters start at 0")
    if rule.kind == "power_decay":
        return float((t + 1.0) ** (-rule.exponent))
    if rule.kind == "constant":
        assert rule.value is not None
        return float(rule.value)
    raise DomainError("resolve the theoretical step rule with f(X^0) before asking for step sizes")


def adaptive_parameter(v_dual: FArray, K: int, sigma: float) -> float:
    """
    Purpose: regularization parameter sigma |v|_inf / (20 log K)
    Input:
        -- v_dual: last dual potential of the block (the gradient C at bootstrap)
        -- K: grid size, at least 2
        -- sigma: positive scale
    Output:
        -- positive parameter, floored at PARAMETER_FLOOR
    """
    if K < 2:
        raise DomainError("the adaptive parameter needs a grid of at least 2 atoms")
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    size = float(numpy.max(numpy.abs(v_dual))) if numpy.size(v_dual) else 0.0
    value = sigma * size / (20.0 * numpy.log(K))
    if not (numpy.isfinite(value) and value > PARAMETER_FLOOR):
        logger.warning("adaptive regularization parameter %.3e degenerate; floored at %.0e", value, PARAMETER_FLOOR)
        return PARAMETER_FLOOR
    return float(value)


def default_tolerance(K: int, K0: int, tol0: float, d: int) -> float:
    """tol0 (sqrt(2^d))^log2(K / K0), the size-dependent outer tolerance"""
    if K < 1 or K0 < 1 or not tol0 > 0:
        raise DomainError("default_tolerance needs K, K0 >= 1 and tol0 > 0")
    return float(tol0 * numpy.sqrt(2.0**d) ** numpy.log2(K / K0))


def delta_metric(
    prev: Sequence[Plan | Matrix],
    curr: Sequence[Plan | Matrix],
    weights: FArray | None = None,
) -> float:
    """
    Purpose: mean over blocks of |Diag(weights) (curr_i - prev_i)|_F
    Input:
        -- prev, curr: iterates block by block
        -- weights: row weights (the diagonal of Lambda^-1), identity if None
    Output:
        -- Delta
    """
    if len(prev) != len(curr) or not curr:
        raise DomainError("delta_metric needs the same positive number of blocks on both sides")
    total = 0.0
    for p, c in zip(prev, curr):
        p_vals = p.values if isinstance(p, Plan) else p
        c_vals = c.values if isinstance(c, Plan) else c
        if p_vals.shape != c_vals.shape:
            raise DomainError(f"block shapes differ: {p_vals.shape} vs {c_vals.shape}")
        diff = dense(c_vals) - dense(p_vals)
        if weights is not None:
            diff = diff * numpy.asarray(weights)[:, None]
        total += float(numpy.linalg.norm(diff))
    return total / len(curr)


def theorem1_bound(tb: TheoryBound, N: int, t_max: int, f0_gap: float) -> float:
    """2 d_bar (2N + 1) sqrt(L f0_gap / t_max) + N lam h_bar"""
    if t_max < 1:
        raise DomainError("t_max must be at least 1")
    return float(2.0 * tb.d_bar * (2 * N + 1) * numpy.sqrt(tb.L * max(f0_gap, 0.0) / t_max) + N * tb.lam * tb.h_bar)


@dataclass(frozen=True)
class MethodConfig:
    """
    kind:                 eralm, s-eralm, klalm or s-klalm
    sigma:                scale of the adaptive regularization parameter
    gamma:                interpolation factor of the sampling mixture
    n_samples:            sample size parameter n_s (floor(n^1.5) per block if None)
    t_hat:                iteration at which s-klalm draws and freezes its support
    tol:                  stop once Delta <= tol (0 disables)
    t_max:                outer iteration cap
    step_rule:            step sizes of the eralm-type convex update
    sinkhorn:             inner solver settings
    seed:                 sampling seed
    fixed_parameter:      constant lam / mu instead of the adaptive rule
    accelerated_sampling: sample without the dense probability grid
    resample_limit:       redraws of an infeasible sampled support before failing
    record_objective:     evaluate f after every iteration
    """

    kind: str = "klalm"
    sigma: float = 1.0
    gamma: float = 0.99
    n_samples: int | None = None
    t_hat: int = 0
    tol: float = 5e-3
    t_max: int = 10_000
    step_rule: StepRule = field(default_factory=StepRule)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    seed: int = 0
    fixed_parameter: float | None = None
    accelerated_sampling: bool = False
    resample_limit: int = 1
    record_objective: bool = True

    def __post_init__(self) -> None:
        if self.kind not in METHOD_KINDS:
            raise DomainError(f"unknown method {self.kind!r}; choose from {METHOD_KINDS}")
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError("gamma must lie in [0, 1]")
        if self.n_samples is not None and self.n_samples < 1:
            raise DomainError("n_samples must be at least 1")
        if self.t_hat < 0:
            raise DomainError("t_hat must be nonnegative")
        if self.tol < 0 or self.t_max < 1:
            raise DomainError("tol must be nonnegative and t_max at least 1")
        if self.fixed_parameter is not None and not self.fixed_parameter > 0:
            raise DomainError("a fixed regularization parameter must be positive")
        if self.seed < 0 or self.resample_limit < 0:
            raise DomainError("seed and resample_limit must be nonnegative")

    def samples_for(self, n_cols: int) -> int:
        return self.n_samples if self.n_samples is not None else int(numpy.floor(n_cols**1.5))


@dataclass(frozen=True)
class IterationRecord:
    t: int
    delta: float
    objective: float
    parameters: tuple[float, ...]
    support_sizes: tuple[int, ...]
    sweeps: tuple[int, ...]
    wall_ms: float
    phase_ms: dict[str, float]
    kernel_evaluations: int


@dataclass
class RunRecord:
    """Trace and final state of one run; owned by that run."""

    method: str
    config: MethodConfig | None = None
    iterations: list[IterationRecord] = field(default_factory=list)
    plans: list[Plan] = field(default_factory=list)
    dual_u: list[FArray] = field(default_factory=list)
    dual_v: list[FArray] = field(default_factory=list)
    supports: list[SampledSupport | None] = field(default_factory=list)
    stop_reason: str = ""
    resamples: int = 0
    initial_objective: float = float("nan")

    @property
    def deltas(self) -> FArray:
        return numpy.array([rec.delta for rec in self.iterations])

    @property
    def final_objective(self) -> float:
        if not self.iterations:
            return self.initial_objective
        return self.iterations[-1].objective

    @property
    def kernel_evaluations(self) -> int:
        return sum(rec.kernel_evaluations for rec in self.iterations)

    def to_csv(self, path: Path | str, include_timing: bool = True) -> None:
        """Versioned trace CSV; timing columns are written as 0 when include_timing is False."""
        with open(path, "w", newline="", encoding="utf-8") as handle:
            handle.write(TRACE_SCHEMA + "\n")
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for rec in self.iterations:
                timing = (
                    [rec.wall_ms] + [rec.phase_ms.get(p, 0.0) for p in ("sampling", "kernel", "sinkhorn", "gradient")]
                    if include_timing
                    else [0.0] * 5
                )
                writer.writerow(
                    [rec.t, repr(rec.delta), repr(rec.objective), sum(rec.support_sizes), sum(rec.sweeps)]
                    + [f"{x:.3f}" for x in timing]
                )


def random_initial_plans(
    marginals: Sequence[MarginalPair],
    seed: int = 0,
    sinkhorn: SinkhornConfig | None = None,
) -> list[Plan]:
    """
    Purpose: strictly positive feasible starting plans
    Method:
        a uniform (0, 1] random matrix per block, scaled onto U(a_i, b_i) by Sinkhorn
    """
    cfg = sinkhorn or SinkhornConfig(s_max=10_000, feas_tol=1e-10)
    plans = []
    for i, (a, b) in enumerate(marginals):
        rng = numpy.random.default_rng([seed, i])
        kernel = KernelMatrix(1.0 - rng.random((a.length, b.length)))
        state, status = sinkhorn_solve(kernel, a, b, cfg)
        if not status.converged:
            logger.warning("initial plan of block %d only reached violation %.3e", i, status.violation)
        plans.append(recover_plan(state, kernel, a, b))
    return plans


@dataclass
class _Block:
    plan: Matrix
    a: Marginal
    b: Marginal
    parameter: float | None = None
    dual_u: FArray | None = None
    dual_v: FArray | None = None
    frozen: SampledSupport | None = None


class _Timer:
    def __init__(self) -> None:
        self.ms: dict[str, float] = {"sampling": 0.0, "kernel": 0.0, "sinkhorn": 0.0, "gradient": 0.0}
        self._start = 0.0

    def start(self) -> None:
        self._start = time.perf_counter()

    def stop(self, phase: str) -> None:
        self.ms[phase] += 1000.0 * (time.perf_counter() - self._start)


def _convex_update(plan: Matrix, target: Matrix, alpha: float) -> FArray:
    out = (1.0 - alpha) * dense(plan)
    if scipy.sparse.issparse(target):
        coo = target.tocoo()
        numpy.add.at(out, (coo.row, coo.col), alpha * coo.data)
    else:
        out += alpha * numpy.asarray(target)
    return out


def _log_entries(values: FArray) -> FArray:
    with numpy.errstate(divide="ignore"):
        return numpy.log(values)


def _log_gibbs(cost: FArray, lam: float) -> FArray:
    return -cost / lam


def _kl_kernel(cost: FArray, mu: float, plan: Matrix) -> Matrix:
    """log of exp(-C/mu) * X with the storage of X"""
    if scipy.sparse.issparse(plan):
        csr = scipy.sparse.csr_array(plan)
        rows = numpy.repeat(numpy.arange(csr.shape[0]), numpy.diff(csr.indptr))
        data = _log_entries(csr.data) - cost[rows, csr.indices] / mu
        return scipy.sparse.csr_array((data, csr.indices, csr.indptr), shape=csr.shape)
    return _log_entries(numpy.asarray(plan)) - cost / mu


def _check_kernel(log_values: Matrix, i: int, t: int) -> None:
    data = log_values.data if scipy.sparse.issparse(log_values) else log_values
    if data.size == 0 or not numpy.any(numpy.isfinite(data)):
        raise InfeasibleSubproblemError(f"kernel of block {i} has no entries at t={t}")


class _Driver:
    """Shared outer loop; `kind` selects the kernel and the update."""

    def __init__(
        self,
        oracle: ObjectiveOracle,
        marginals: Sequence[MarginalPair],
        cfg: MethodConfig,
        initial: Sequence[Plan | Matrix] | None,
        weights: FArray | None,
        on_iterate: IterateCallback | None,
    ) -> None:
        if len(marginals) != oracle.block_count:
            raise DomainError(f"oracle has {oracle.block_count} blocks, got {len(marginals)} marginal pairs")
        for i, ((a, b), shape) in enumerate(zip(marginals, oracle.shapes)):
            if (a.length, b.length) != tuple(shape):
                raise DomainError(f"block {i}: marginals {(a.length, b.length)} do not match shape {shape}")
        self.oracle = oracle
        self.cfg = cfg
        self.weights = weights
        self.on_iterate = on_iterate
        start = list(initial) if initial is not None else random_initial_plans(marginals, cfg.seed)
        if len(start) != len(marginals):
            raise DomainError("one initial plan per block is required")
        self.blocks = []
        for plan, (a, b) in zip(start, marginals):
            values = plan.values if isinstance(plan, Plan) else plan
            if scipy.sparse.issparse(values):
                values = scipy.sparse.csr_array(values, dtype=numpy.float64)
            else:
                values = numpy.array(values, dtype=numpy.float64)
            self.blocks.append(_Block(values, a, b))
        if cfg.kind in ("klalm", "s-klalm"):
            for i, blk in enumerate(self.blocks):
                data = blk.plan.data if scipy.sparse.issparse(blk.plan) else blk.plan
                if data.size and numpy.min(data) < 0:
                    raise DomainError(f"initial plan of block {i} has negative entries")
        self.record = RunRecord(method=cfg.kind, config=cfg)

    def current(self) -> list[Matrix]:
        return [blk.plan for blk in self.blocks]

    def _parameter(self, blk: _Block, cost: FArray) -> float:
        if self.cfg.fixed_parameter is not None:
            return self.cfg.fixed_parameter
        n = max(blk.b.length, 2)
        source = cost if blk.dual_v is None else blk.dual_v
        return adaptive_parameter(source, n, self.cfg.sigma)

    def _sample(self, blk: _Block, t: int, i: int, attempt: int, timer: _Timer) -> SampledSupport:
        timer.start()
        dist = mixture_probabilities(blk.plan, blk.a, blk.b, self.cfg.gamma)
        support = poisson_sample(
            dist,
            self.cfg.samples_for(blk.b.length),
            (self.cfg.seed, t, i, attempt),
            accelerated=self.cfg.accelerated_sampling,
        )
        timer.stop("sampling")
        return support

    def _solve(self, log_kernel: Matrix, blk: _Block, lam: float, timer: _Timer) -> tuple[Matrix, int]:
        timer.start()
        warm = None if blk.dual_u is None or blk.dual_v is None else (blk.dual_u, blk.dual_v)
        kernel, state, offsets, status = sinkhorn_solve_stabilized(
            log_kernel, lam, blk.a, blk.b, self.cfg.sinkhorn, warm
        )
        target = kernel.scaled(state.u_check, state.v_check)
        timer.stop("sinkhorn")
        u, v = state.u_check, state.v_check
        s, q = offsets
        # atoms without mass keep the offset as potential
        blk.dual_u = numpy.where(u > 0, lam * numpy.log(numpy.where(u > 0, u, 1.0)) + s, s)
        blk.dual_v = numpy.where(v > 0, lam * numpy.log(numpy.where(v > 0, v, 1.0)) + q, q)
        return target, status.sweeps

    def _update_block(self, i: int, t: int, timer: _Timer) -> tuple[float, int, int, int]:
        """returns (parameter, support size, sweeps, kernel evaluations)"""
        blk = self.blocks[i]
        kind = self.cfg.kind
        timer.start()
        cost = self.oracle.block_gradient(i, self.current())
        timer.stop("gradient")
        lam = self._parameter(blk, cost)
        blk.parameter = lam
        m, n = cost.shape

        if kind == "eralm":
            timer.start()
            log_kernel = _log_gibbs(cost, lam)
            timer.stop("kernel")
            _check_kernel(log_kernel, i, t)
            target, sweeps = self._solve(log_kernel, blk, lam, timer)
            blk.plan = _convex_update(blk.plan, target, step_size(t, self.cfg.step_rule))
            return lam, m * n, sweeps, m * n

        if kind == "s-eralm":
            for attempt in range(self.cfg.resample_limit + 1):
                support = self._sample(blk, t, i, attempt, timer)
                timer.start()
                if support.is_full:
                    log_kernel = _log_gibbs(cost, lam)
                else:
                    log_kernel = sparsify_log_kernel(lambda r, c: -cost[r, c] / lam, support)
                timer.stop("kernel")
                try:
                    _check_kernel(log_kernel, i, t)
                    target, sweeps = self._solve(log_kernel, blk, lam, timer)
                    break
                except InfeasibleSubproblemError as exc:
                    if attempt == self.cfg.resample_limit:
                        raise InfeasibleSubproblemError(
                            f"block {i} at t={t}: sampled support stayed infeasible after {attempt} resample(s): {exc}"
                        ) from exc
                    self.record.resamples += 1
                    logger.warning("block %d at t=%d: infeasible sampled support, resampling", i, t)
            blk.plan = _convex_update(blk.plan, target, step_size(t, self.cfg.step_rule))
            return lam, support.size, sweeps, support.size

        if kind == "klalm" or (kind == "s-klalm" and t < self.cfg.t_hat):
            timer.start()
            log_kernel = _kl_kernel(cost, lam, blk.plan)
            timer.stop("kernel")
            _check_kernel(log_kernel, i, t)
            target, sweeps = self._solve(log_kernel, blk, lam, timer)
            blk.plan = target
            size = log_kernel.nnz if scipy.sparse.issparse(log_kernel) else log_kernel.size
            return lam, size, sweeps, size

        # s-klalm at or after the critical iteration
        if t == self.cfg.t_hat or blk.frozen is None:
            return self._sampled_kl_step(blk, cost, lam, i, t, timer, draw=True)
        return self._sampled_kl_step(blk, cost, lam, i, t, timer, draw=False)

    def _sampled_kl_step(
        self,
        blk: _Block,
        cost: FArray,
        lam: float,
        i: int,
        t: int,
        timer: _Timer,
        draw: bool,
    ) -> tuple[float, int, int, int]:
        attempts = self.cfg.resample_limit + 1 if draw else 1
        for attempt in range(attempts):
            if draw:
                blk.frozen = self._sample(blk, t, i, attempt, timer)
            support = blk.frozen
            assert support is not None
            rows: IArray = support.rows
            cols: IArray = support.cols
            timer.start()
            previous = gather_entries(blk.plan, rows, cols)
            log_kernel = sparsify_log_kernel(lambda r, c: _log_entries(previous) - cost[r, c] / lam, support)
            timer.stop("kernel")
            try:
                _check_kernel(log_kernel, i, t)
                target, sweeps = self._solve(log_kernel, blk, lam, timer)
                break
            except InfeasibleSubproblemError as exc:
                if attempt == attempts - 1:
                    where = "sampled" if draw else "frozen"
                    raise InfeasibleSubproblemError(f"block {i} at t={t}: {where} support is infeasible: {exc}") from exc
                self.record.resamples += 1
                logger.warning("block %d at t=%d: infeasible sampled support, resampling", i, t)
        blk.plan = target
        return lam, support.size, sweeps, support.size

    def run(self) -> RunRecord:
        cfg = self.cfg
        record = self.record
        N = len(self.blocks)
        if cfg.record_objective or cfg.step_rule.kind == "theoretical":
            record.initial_objective = self.oracle.objective(self.current())
        if cfg.step_rule.kind == "theoretical":
            d_bar = max(diameter_bound(blk.a, blk.b) for blk in self.blocks)
            self.cfg = cfg = dataclasses.replace(
                cfg, step_rule=cfg.step_rule.resolve(record.initial_objective, d_bar, N, cfg.t_max)
            )
            logger.info("theoretical step size %.6g", cfg.step_rule.value)

        record.stop_reason = "t_max"
        for t in range(cfg.t_max):
            if self.on_iterate is not None:
                self.on_iterate(t, [Plan(blk.plan, blk.a, blk.b) for blk in self.blocks])
            tic = time.perf_counter()
            timer = _Timer()
            previous = [blk.plan for blk in self.blocks]
            parameters, sizes, sweeps = [], [], []
            evaluations = 0
            for i in range(N):
                lam, size, swept, evals = self._update_block(i, t, timer)
                parameters.append(lam)
                sizes.append(size)
                sweeps.append(swept)
                evaluations += evals
            delta = delta_metric(previous, self.current(), self.weights)
            objective = self.oracle.objective(self.current()) if cfg.record_objective else float("nan")
            record.iterations.append(
                IterationRecord(
                    t=t,
                    delta=delta,
                    objective=objective,
                    parameters=tuple(parameters),
                    support_sizes=tuple(sizes),
                    sweeps=tuple(sweeps),
                    wall_ms=1000.0 * (time.perf_counter() - tic),
                    phase_ms=dict(timer.ms),
                    kernel_evaluations=evaluations,
                )
            )
            logger.debug("%s t=%d delta=%.3e objective=%.10g", cfg.kind, t, delta, objective)
            if cfg.tol > 0 and delta <= cfg.tol:
                record.stop_reason = "tol"
                break

        record.plans = [Plan(blk.plan, blk.a, blk.b) for blk in self.blocks]
        record.dual_u = [blk.dual_u if blk.dual_u is not None else numpy.zeros(blk.a.length) for blk in self.blocks]
        record.dual_v = [blk.dual_v if blk.dual_v is not None else numpy.zeros(blk.b.length) for blk in self.blocks]
        record.supports = [blk.frozen for blk in self.blocks]
        record.config = cfg
        logger.info(
            "%s stopped (%s) after %d iterations, objective %.10g",
            cfg.kind,
            record.stop_reason,
            len(record.iterations),
            record.final_objective,
        )
        return record


def _run(
    kind: str,
    oracle: ObjectiveOracle,
    marginals: Sequence[MarginalPair],
    cfg: MethodConfig | None,
    initial: Sequence[Plan | Matrix] | None,
    weights: FArray | None,
    on_iterate: IterateCallback | None,
) -> RunRecord:
    cfg = dataclasses.replace(cfg, kind=kind) if cfg is not None else MethodConfig(kind=kind)
    return _Driver(oracle, marginals, cfg, initial, weights, on_iterate).run()


def run_eralm(
    oracle: ObjectiveOracle,
    marginals: Sequence[MarginalPair],
    cfg: MethodConfig | None = None,
    initial: Sequence[Plan | Matrix] | None = None,
    weights: FArray | None = None,
    on_iterate: IterateCallback | None = None,
) -> RunRecord:
    """
    Purpose: entropic regularized ALM with convex updates
    Input:
        -- oracle: objective and block gradients
        -- marginals: (a_i, b_i) per block
        -- cfg: method settings (kind is forced to eralm)
        -- initial: feasible starting plans (random if None)
        -- weights: row weights of the Delta stopping metric
        -- on_iterate: called with (t, X^t) before every iteration
    Output:
        -- RunRecord
    """
    return _run("eralm", oracle, marginals, cfg, initial, weights, on_iterate)


def run_s_eralm(
    oracle: ObjectiveOracle,
    marginals: Sequence[MarginalPair],
    cfg: MethodConfig | None = None,
    initial: Sequence[Plan | Matrix] | None = None,
    weights: FArray | None = None,
    on_iterate: IterateCallback | None = None,
) -> RunRecord:
    """ERALM with a fresh Poisson-sampled kernel in every block update."""
    return _run("s-eralm", oracle, marginals, cfg, initial, weights, on_iterate)


def run_klalm(
    oracle: ObjectiveOracle,
    marginals: Sequence[MarginalPair],
    cfg: MethodConfig | None = None,
    initial: Sequence[Plan | Matrix] | None = None,
    weights: FArray | None = None,
    on_iterate: IterateCallback | None = None,
) -> RunRecord:
    """KL-proximal variant: kernel exp(-C/mu) * X^t, direct assignment. Zeros of X^t stay zero."""
    return _run("klalm", oracle, marginals, cfg, initial, weights, on_iterate)


def run_s_klalm(
    oracle: ObjectiveOracle,
    marginals: Sequence[MarginalPair],
    cfg: MethodConfig | None = None,
    initial: Sequence[Plan | Matrix] | None = None,
    weights: FArray | None = None,
    on_iterate: IterateCallback | None = None,
) -> RunRecord:
    """KLALM with the support drawn once at t = t_hat and frozen afterwards."""
    return _run("s-klalm", oracle, marginals, cfg, initial, weights, on_iterate)


RUNNERS = {
    "eralm": run_eralm,
    "s-eralm": run_s_eralm,
    "klalm": run_klalm,
    "s-klalm": run_s_klalm,
}


def run_method(
    oracle: ObjectiveOracle,
    marginals: Sequence[MarginalPair],
    cfg: MethodConfig,
    initial: Sequence[Plan | Matrix] | None = None,
    weights: FArray | None = None,
    on_iterate: IterateCallback | None = None,
) -> RunRecord:
    """Dispatch on cfg.kind."""
    return RUNNERS[cfg.kind](oracle, marginals, cfg, initial, weights, on_iterate)
