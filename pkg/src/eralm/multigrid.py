# Cascadic multigrid driver
# =========================

# Level 0 is solved from a random start with the accurate method. Every finer
# level refines the mesh (1-D equimass cells split at their mass median, boxes
# split into 2^d congruent children), truncates it again, prolongates the coarse
# couplings

#     y_kl = y_{k'l'} / (s_k' s_l'),   k', l' the parents, s the number of surviving children,

# and runs the cheap method from there. Levels are strictly sequential.


from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy
import scipy.sparse

from eralm.core import (
    DomainError,
    EralmError,
    FArray,
    IArray,
    Matrix,
    Plan,
    ResourceLimitError,
)
from eralm.methods import (
    MethodConfig,
    RunRecord,
    default_tolerance,
    random_initial_plans,
    run_method,
)
from eralm.mmot import (
    TRUNCATION_THRESHOLD,
    Density,
    DiscreteSystem,
    Mesh,
    build_mesh,
    discretize,
    kept_atoms,
    mmot_oracle,
)

logger = logging.getLogger(__name__)

# weight of the product-plan fill on fine atoms without a surviving parent
ORPHAN_FILL: float = 1e-3


def refine(mesh: Mesh) -> Mesh:
    """
    Purpose: one refinement step with parent links
    Output:
        -- equimass: 2 K cells split at the mass median of each parent
        -- equisize: 2^d K boxes, children of cell k stored at 2^d k ... 2^d (k + 1) - 1
    """
    density = mesh.density
    if mesh.style == "equimass":
        starts = density.cdf(mesh.lower[:, 0])
        medians = numpy.array([density.quantile(y) for y in starts + 0.5 * mesh.masses])
        lower = numpy.column_stack([mesh.lower[:, 0], medians]).reshape(-1, 1)
        upper = numpy.column_stack([medians, mesh.upper[:, 0]]).reshape(-1, 1)
        parent = numpy.repeat(numpy.arange(mesh.K, dtype=numpy.int64), 2)
        return Mesh(density, lower, upper, mesh.style, parent)
    d = mesh.dim
    offsets = numpy.indices((2,) * d).reshape(d, -1).T  # (2^d, d) in C order
    half = 0.5 * (mesh.upper - mesh.lower)
    lower = (mesh.lower[:, None, :] + offsets[None, :, :] * half[:, None, :]).reshape(-1, d)
    upper = lower + numpy.repeat(half, 2**d, axis=0)
    parent = numpy.repeat(numpy.arange(mesh.K, dtype=numpy.int64), 2**d)
    return Mesh(density, lower, upper, mesh.style, parent)


@dataclass
class MeshHierarchy:
    """Meshes and truncated systems per level; meshes[l].parent points into meshes[l - 1]."""

    meshes: list[Mesh]
    systems: list[DiscreteSystem] = field(default_factory=list)
    threshold: float = TRUNCATION_THRESHOLD
    beta: float = 1.0
    normalization: str = "unit"

    @property
    def levels(self) -> int:
        return len(self.meshes)

    def refine_to(self, n_levels: int) -> None:
        while len(self.meshes) < n_levels:
            self.meshes.append(refine(self.meshes[-1]))

    def system(self, level: int) -> DiscreteSystem:
        while len(self.systems) <= level:
            mesh = self.meshes[len(self.systems)]
            self.systems.append(
                discretize(mesh.density, mesh, self.threshold, self.beta, self.normalization)
            )
        return self.systems[level]

    def truncated_size(self, level: int) -> int:
        return int(kept_atoms(self.meshes[level].masses, self.threshold).size)


def _prolongation_matrix(coarse: DiscreteSystem, fine: DiscreteSystem) -> tuple[scipy.sparse.csr_array, IArray]:
    parent_mesh = fine.mesh.parent
    if parent_mesh is None:
        raise DomainError("orphan child: the fine mesh has no parent links")
    parents = parent_mesh[fine.kept]
    if numpy.any(parents < 0) or numpy.any(parents >= coarse.mesh.K):
        raise DomainError("orphan child: parent index outside the coarse mesh")
    position = numpy.full(coarse.mesh.K, -1, dtype=numpy.int64)
    position[coarse.kept] = numpy.arange(coarse.K)
    owner = position[parents]
    linked = owner >= 0
    survivors = numpy.bincount(owner[linked], minlength=coarse.K)
    lost = int(numpy.count_nonzero(survivors == 0))
    if lost:
        logger.warning("%d coarse atoms lost all children to truncation; their mass is dropped", lost)
    rows = numpy.flatnonzero(linked)
    P = scipy.sparse.csr_array(
        (1.0 / survivors[owner[linked]], (rows, owner[linked])),
        shape=(fine.K, coarse.K),
    )
    return P, numpy.flatnonzero(~linked).astype(numpy.int64)


def _orphan_fill(Y: scipy.sparse.csr_array, rho: FArray) -> scipy.sparse.csr_array:
    """ORPHAN_FILL rho rho^T restricted to rows and columns that received no mass"""
    K = rho.size
    empty_rows = numpy.flatnonzero(numpy.asarray(Y.sum(axis=1)).ravel() <= 0)
    empty_cols = numpy.flatnonzero(numpy.asarray(Y.sum(axis=0)).ravel() <= 0)
    if empty_rows.size == 0 and empty_cols.size == 0:
        return Y
    logger.warning("filling %d rows and %d columns without prolongated mass", empty_rows.size, empty_cols.size)
    everything = numpy.arange(K)
    others = numpy.setdiff1d(everything, empty_rows)
    r = numpy.concatenate([numpy.repeat(empty_rows, K), numpy.tile(others, empty_cols.size)])
    c = numpy.concatenate([numpy.tile(everything, empty_rows.size), numpy.repeat(empty_cols, others.size)])
    fill = scipy.sparse.csr_array((ORPHAN_FILL * rho[r] * rho[c], (r, c)), shape=(K, K))
    return scipy.sparse.csr_array(Y + fill)


def prolongate(Y_prev: Sequence[Plan | Matrix], hierarchy: MeshHierarchy, level: int) -> list[Plan]:
    """
    Purpose: carry level-1 couplings to `level`
    Input:
        -- Y_prev: couplings on the truncated grid of level - 1
        -- hierarchy: meshes and systems
        -- level: target level, at least 1
    Output:
        -- csr couplings on the truncated grid of `level`, block sums over child pairs equal to Y_prev
    """
    if not 1 <= level < hierarchy.levels:
        raise DomainError(f"cannot prolongate to level {level} of a {hierarchy.levels}-level hierarchy")
    coarse = hierarchy.system(level - 1)
    fine = hierarchy.system(level)
    P, orphans = _prolongation_matrix(coarse, fine)
    if orphans.size:
        logger.warning("level %d: %d atoms have a truncated parent", level, orphans.size)
    target = fine.marginal()
    plans = []
    for Y in Y_prev:
        values = Y.values if isinstance(Y, Plan) else Y
        if values.shape != (coarse.K, coarse.K):
            raise DomainError(f"coarse coupling has shape {values.shape}, level {level - 1} has K={coarse.K}")
        fine_plan = scipy.sparse.csr_array(P @ scipy.sparse.csr_array(values) @ P.T)
        plans.append(Plan(_orphan_fill(fine_plan, fine.rho), target, target))
    return plans


@dataclass(frozen=True)
class LevelConfig:
    """
    n_levels:    number of levels, at least 1
    tol0:        outer tolerance of level 0
    tol_base:    base of the growth rule above level 0 (tol0 if None)
    tolerances:  explicit per-level tolerances, overriding the rule
    """

    n_levels: int = 1
    tol0: float = 5e-3
    tol_base: float | None = None
    tolerances: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.n_levels < 1:
            raise DomainError("at least one level is required")
        if not self.tol0 > 0 or (self.tol_base is not None and not self.tol_base > 0):
            raise DomainError("level tolerances must be positive")
        if self.tolerances is not None:
            if len(self.tolerances) != self.n_levels or min(self.tolerances) <= 0:
                raise DomainError("explicit tolerances need one positive value per level")

    def tolerance(self, level: int, K: int, K0: int, d: int) -> float:
        """tol_l = base (sqrt(2^d))^log2(K_l / K_0), base = tol0 at level 0"""
        if self.tolerances is not None:
            return self.tolerances[level]
        if level == 0:
            return self.tol0
        return default_tolerance(K, K0, self.tol_base if self.tol_base is not None else self.tol0, d)


@dataclass
class CMGResult:
    hierarchy: MeshHierarchy
    records: list[RunRecord]

    def summary(self) -> list[tuple[int, int, int, float]]:
        """(level, K, K_trunc, objective) per level"""
        return [
            (level, self.hierarchy.meshes[level].K, self.hierarchy.systems[level].K, rec.final_objective)
            for level, rec in enumerate(self.records)
        ]


def run_cmg(
    density: Density,
    levels: LevelConfig,
    cfg0: MethodConfig | None = None,
    cfg_cheap: MethodConfig | None = None,
    K0: int = 90,
    style: str = "equimass",
    threshold: float = TRUNCATION_THRESHOLD,
    beta: float = 1.0,
    normalization: str = "unit",
    max_dense_entries: int | None = None,
) -> CMGResult:
    """
    Purpose: cascadic multigrid solve of the Coulomb transport problem
    Input:
        -- density: electron density
        -- levels: number of levels and tolerance schedule
        -- cfg0: accurate method of level 0 (klalm by default)
        -- cfg_cheap: method of the finer levels (s-klalm with t_hat = 0 by default)
        -- K0, style: initial mesh
        -- threshold, beta, normalization: discretization settings
        -- max_dense_entries: abort before a level needs more dense coupling entries
    Output:
        -- CMGResult with one RunRecord per level
    """
    cfg0 = cfg0 or MethodConfig(kind="klalm")
    cfg_cheap = cfg_cheap or MethodConfig(kind="s-klalm", t_hat=0, seed=cfg0.seed)
    hierarchy = MeshHierarchy(
        [build_mesh(density, K0, style)], threshold=threshold, beta=beta, normalization=normalization
    )
    hierarchy.refine_to(levels.n_levels)
    records: list[RunRecord] = []
    previous: list[Plan] = []
    for level in range(levels.n_levels):
        mesh = hierarchy.meshes[level]
        try:
            if max_dense_entries is not None:
                needed = (density.n_electrons - 1) * hierarchy.truncated_size(level) ** 2
                if needed > max_dense_entries:
                    raise ResourceLimitError(
                        f"needs {needed} dense coupling entries, above the limit of {max_dense_entries}"
                    )
            system = hierarchy.system(level)
            tol = levels.tolerance(level, mesh.K, K0, density.dim)
            base = cfg0 if level == 0 else cfg_cheap
            cfg = dataclasses.replace(base, tol=tol)
            initial = (
                random_initial_plans(system.marginals(), cfg.seed)
                if level == 0
                else prolongate([p.values for p in previous], hierarchy, level)
            )
            logger.info("level %d: K=%d, K_trunc=%d, %s, tol=%.3e", level, mesh.K, system.K, cfg.kind, tol)
            record = run_method(mmot_oracle(system), system.marginals(), cfg, initial, weights=system.lambda_inv)
        except EralmError as exc:
            raise type(exc)(f"level {level}: {exc}") from exc
        logger.info(
            "level %d finished: objective %.10g after %d iterations", level, record.final_objective, len(record.iterations)
        )
        records.append(record)
        previous = record.plans
    return CMGResult(hierarchy, records)
