# Multi-marginal transport with Coulomb cost (strictly correlated electrons)
# ==========================================================================

# A density rho on a box Omega with N_e electrons is discretized on K cells with
# masses rho_k and barycenters d_k. The N_e-marginal problem is written with the
# N_e - 1 pair couplings Y_i between electron 1 and electron i + 1:

#     f(Y) = sum_i <Y_i, C + beta Lambda^-1> + sum_{i<j} <Y_i, Lambda^-1 Y_j C + beta Lambda^-2 Y_j>
#     Y_i in U(rho, rho),   Lambda = Diag(rho),   c_kl = 1 / |d_k - d_l|,  c_kk = 0

# Cells carrying less than 0.1% of the largest cell mass are dropped and the
# remaining masses renormalized to unit total ("unit") or to N_e ("electrons").

# In 1-D the continuous optimum is known: electron i sits at
# f_i(x) = F^-1((F(x) + i - 1) mod N_e), F the cumulative electron number.


from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy
import scipy.integrate
import scipy.optimize
import scipy.sparse
import scipy.special
from scipy.spatial.distance import cdist

from eralm.core import (
    DomainError,
    FArray,
    IArray,
    Marginal,
    Matrix,
    ObjectiveOracle,
    Plan,
    dense,
    inner,
    matrix_values,
    row_sums,
)

logger = logging.getLogger(__name__)

STYLES = ("equimass", "equisize")
NORMALIZATIONS = ("unit", "electrons")

# cells below this fraction of the largest cell mass are dropped
TRUNCATION_THRESHOLD: float = 1e-3


@dataclass(frozen=True)
class GaussianTerm:
    """weight * exp(-decay |r - center|^2)"""

    weight: float
    decay: float
    center: tuple[float, ...]


@dataclass(frozen=True)
class Density:
    """
    Unnormalized electron density on an axis-aligned box, scaled to n_electrons.

    rho(r) = sum_g weight_g exp(-decay_g |r - c_g|^2) + cosine (cos(pi r) + 1) + constant
    The cosine term is one-dimensional.
    """

    domain: tuple[tuple[float, float], ...]
    n_electrons: int
    gaussians: tuple[GaussianTerm, ...] = ()
    cosine: float = 0.0
    constant: float = 0.0
    name: str = "custom"

    def __post_init__(self) -> None:
        if not 1 <= len(self.domain) <= 3:
            raise DomainError(f"domain: dimension must be 1, 2 or 3, got {len(self.domain)}")
        for lo, hi in self.domain:
            if not lo < hi:
                raise DomainError(f"domain: empty interval [{lo}, {hi}]")
        if self.n_electrons < 1:
            raise DomainError("n_electrons: must be at least 1")
        for g in self.gaussians:
            if not (g.weight > 0 and g.decay > 0):
                raise DomainError("gaussians: weight and decay must be positive")
            if len(g.center) != len(self.domain):
                raise DomainError(f"gaussians: center {g.center} does not match dimension {len(self.domain)}")
        if self.cosine < 0 or self.constant < 0:
            raise DomainError("cosine/constant: weights must be nonnegative")
        if self.cosine > 0 and len(self.domain) != 1:
            raise DomainError("cosine: the cosine profile is one-dimensional")
        if not (self.gaussians or self.cosine > 0 or self.constant > 0):
            raise DomainError("gaussians: the density has no positive term")

    @property
    def dim(self) -> int:
        return len(self.domain)

    @property
    def lower(self) -> FArray:
        return numpy.array([lo for lo, _ in self.domain])

    @property
    def upper(self) -> FArray:
        return numpy.array([hi for _, hi in self.domain])

    def raw(self, points: FArray) -> FArray:
        """unnormalized density at points of shape (k, d)"""
        pts = numpy.atleast_2d(numpy.asarray(points, dtype=numpy.float64))
        out = numpy.full(pts.shape[0], self.constant)
        for g in self.gaussians:
            out += g.weight * numpy.exp(-g.decay * numpy.sum((pts - numpy.asarray(g.center)) ** 2, axis=1))
        if self.cosine > 0:
            out += self.cosine * (numpy.cos(numpy.pi * pts[:, 0]) + 1.0)
        return out

    def raw_box_integral(self, lower: FArray, upper: FArray) -> FArray:
        """exact integral of the unnormalized density over boxes [lower_k, upper_k]"""
        lo = numpy.atleast_2d(numpy.asarray(lower, dtype=numpy.float64))
        hi = numpy.atleast_2d(numpy.asarray(upper, dtype=numpy.float64))
        out = self.constant * numpy.prod(hi - lo, axis=1)
        for g in self.gaussians:
            c = numpy.asarray(g.center)
            root = numpy.sqrt(g.decay)
            per_axis = (
                0.5
                * numpy.sqrt(numpy.pi)
                / root
                * (scipy.special.erf(root * (hi - c)) - scipy.special.erf(root * (lo - c)))
            )
            out = out + g.weight * numpy.prod(per_axis, axis=1)
        if self.cosine > 0:
            out = out + self.cosine * (
                (hi[:, 0] - lo[:, 0]) + (numpy.sin(numpy.pi * hi[:, 0]) - numpy.sin(numpy.pi * lo[:, 0])) / numpy.pi
            )
        return numpy.asarray(out)

    @cached_property
    def raw_total(self) -> float:
        return float(self.raw_box_integral(self.lower[None, :], self.upper[None, :])[0])

    def evaluate(self, points: FArray) -> FArray:
        """density normalized to n_electrons"""
        return self.n_electrons * self.raw(points) / self.raw_total

    def box_masses(self, lower: FArray, upper: FArray) -> FArray:
        """electron number in each box"""
        return self.n_electrons * self.raw_box_integral(lower, upper) / self.raw_total

    def cdf(self, x: FArray) -> FArray:
        """cumulative electron number F(x) on [lo, x] (1-D)"""
        if self.dim != 1:
            raise DomainError("the cumulative distribution is only defined in one dimension")
        xs = numpy.clip(numpy.atleast_1d(numpy.asarray(x, dtype=numpy.float64)), self.domain[0][0], self.domain[0][1])
        return self.box_masses(numpy.full((xs.size, 1), self.domain[0][0]), xs[:, None])

    def quantile(self, y: float) -> float:
        """F^-1(y) for y in [0, n_electrons] by bracketing root search"""
        lo, hi = self.domain[0]
        if y <= 0:
            return lo
        if y >= self.n_electrons:
            return hi
        return float(scipy.optimize.brentq(lambda x: float(self.cdf(x)[0]) - y, lo, hi, xtol=1e-14))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "domain": [list(iv) for iv in self.domain],
            "n_electrons": self.n_electrons,
            "gaussians": [{"weight": g.weight, "decay": g.decay, "center": list(g.center)} for g in self.gaussians],
            "cosine": self.cosine,
            "constant": self.constant,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Density":
        """Build a density from a manifest mapping; errors name the offending field."""
        for key in ("domain", "n_electrons"):
            if key not in data:
                raise DomainError(f"{key}: missing from density manifest")
        try:
            domain = tuple((float(lo), float(hi)) for lo, hi in data["domain"])
        except (TypeError, ValueError) as exc:
            raise DomainError(f"domain: expected a list of [lo, hi] pairs ({exc})") from exc
        try:
            gaussians = tuple(
                GaussianTerm(float(g["weight"]), float(g["decay"]), tuple(float(c) for c in g["center"]))
                for g in data.get("gaussians", [])
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DomainError(f"gaussians: each term needs weight, decay and center ({exc})") from exc
        return cls(
            domain=domain,
            n_electrons=int(data["n_electrons"]),
            gaussians=gaussians,
            cosine=float(data.get("cosine", 0.0)),
            constant=float(data.get("constant", 0.0)),
            name=str(data.get("name", "custom")),
        )


def _g(weight: float, decay: float, *center: float) -> GaussianTerm:
    return GaussianTerm(weight, decay, tuple(center))


@dataclass(frozen=True)
class SystemSpec:
    density: Density
    style: str
    K0: int


SYSTEMS: dict[int, SystemSpec] = {
    1: SystemSpec(Density(((-1.0, 1.0),), 3, cosine=1.0, name="system 1"), "equimass", 90),
    2: SystemSpec(
        Density(((-1.5, 1.5),), 3, (_g(2.0, 6.0, -0.5), _g(1.5, 4.0, 0.5)), name="system 2"),
        "equimass",
        90,
    ),
    3: SystemSpec(
        Density(((-2.0, 2.0),), 7, (_g(1.0, 1.0 / numpy.sqrt(numpy.pi), 0.0),), name="system 3"),
        "equimass",
        140,
    ),
    4: SystemSpec(
        Density(
            ((-3.0, 3.0),),
            7,
            tuple(_g(1.0, 4.0, c) for c in (-2.0, -1.5, -1.0, -0.5, 2.0 / 3.0, 4.0 / 3.0, 2.0)),
            name="system 4",
        ),
        "equimass",
        140,
    ),
    5: SystemSpec(
        Density(
            ((-3.0, 3.0), (-3.0, 3.0)),
            3,
            (_g(1.0, 3.0, 0.0, 0.96), _g(1.0, 3.0, 1.032, -0.84), _g(1.0, 3.0, -1.032, -0.84)),
            name="system 5",
        ),
        "equisize",
        900,
    ),
    6: SystemSpec(
        Density(
            ((-3.0, 3.0), (-3.0, 3.0)),
            4,
            (_g(2.0, 3.0, 0.0, 1.2), _g(1.0, 3.0, 1.29, -1.05), _g(1.0, 3.0, -1.29, -1.05)),
            name="system 6",
        ),
        "equisize",
        900,
    ),
    7: SystemSpec(
        Density(
            ((-2.0, 2.0), (-2.0, 2.0), (-2.0, 2.0)),
            3,
            (_g(1.0, 3.0, -1.0, -1.0, -1.0), _g(1.0, 3.0, 1.0, 1.0, -1.0), _g(1.0, 3.0, -1.0, 1.0, 1.0)),
            name="system 7",
        ),
        "equisize",
        1728,
    ),
    8: SystemSpec(
        Density(
            ((-2.0, 2.0), (-1.0, 1.0), (-1.0, 1.0)),
            4,
            (_g(3.0, 4.0, -1.0, 0.0, 0.0), _g(1.0, 4.0, 1.0, 0.0, 0.0)),
            name="system 8",
        ),
        "equisize",
        1000,
    ),
}


def get_system(number: int) -> SystemSpec:
    if number not in SYSTEMS:
        raise DomainError(f"system: unknown system {number}; choose from {sorted(SYSTEMS)}")
    return SYSTEMS[number]


@dataclass(frozen=True, eq=False)
class Mesh:
    """
    Axis-aligned boxes [lower_k, upper_k] partitioning the density's domain.

    parent[k] is the index of the coarser cell containing cell k (None on a base mesh).
    """

    density: Density
    lower: FArray
    upper: FArray
    style: str
    parent: IArray | None = None

    @property
    def K(self) -> int:
        return int(self.lower.shape[0])

    @property
    def dim(self) -> int:
        return int(self.lower.shape[1])

    @cached_property
    def masses(self) -> FArray:
        return numpy.maximum(self.density.box_masses(self.lower, self.upper), 0.0)

    @cached_property
    def barycenters(self) -> FArray:
        return numpy.asarray(0.5 * (self.lower + self.upper))

    @property
    def volumes(self) -> FArray:
        return numpy.asarray(numpy.prod(self.upper - self.lower, axis=1))


def _equisize_boxes(density: Density, per_axis: int) -> tuple[FArray, FArray]:
    edges = [numpy.linspace(lo, hi, per_axis + 1) for lo, hi in density.domain]
    index = numpy.indices((per_axis,) * density.dim).reshape(density.dim, -1).T
    lower = numpy.stack([edges[ax][index[:, ax]] for ax in range(density.dim)], axis=1)
    upper = numpy.stack([edges[ax][index[:, ax] + 1] for ax in range(density.dim)], axis=1)
    return lower, upper


def build_mesh(density: Density, K: int, style: str = "equimass") -> Mesh:
    """
    Purpose: initial mesh of K cells
    Input:
        -- density: electron density
        -- K: number of cells (a d-th power for equisize meshes)
        -- style: equimass (1-D, cells of equal electron number) or equisize (uniform grid)
    Output:
        -- Mesh
    """
    if K < 2:
        raise DomainError(f"K: a mesh needs at least 2 cells, got {K}")
    if style not in STYLES:
        raise DomainError(f"style: unknown discretization {style!r}; choose from {STYLES}")
    if style == "equimass":
        if density.dim != 1:
            raise DomainError("style: equimass discretization is only supported in one dimension")
        lo, hi = density.domain[0]
        cuts = [density.quantile(y) for y in numpy.linspace(0.0, density.n_electrons, K + 1)[1:-1]]
        edges = numpy.array([lo, *cuts, hi])
        return Mesh(density, edges[:-1, None], edges[1:, None], style)
    per_axis = int(round(K ** (1.0 / density.dim)))
    if per_axis**density.dim != K:
        raise DomainError(f"K: equisize meshes need a {density.dim}-th power, got {K}")
    lower, upper = _equisize_boxes(density, per_axis)
    return Mesh(density, lower, upper, style)


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """
    Truncated discretization: masses rho, barycenters, Coulomb cost, penalty beta.

    kept[k] is the mesh index of atom k.
    """

    rho: FArray
    barycenters: FArray
    cost: FArray
    beta: float
    n_electrons: int
    kept: IArray
    mesh: Mesh
    normalization: str = "unit"
    threshold: float = TRUNCATION_THRESHOLD

    @property
    def K(self) -> int:
        return int(self.rho.size)

    @property
    def n_blocks(self) -> int:
        return self.n_electrons - 1

    @property
    def lambda_inv(self) -> FArray:
        return numpy.asarray(1.0 / self.rho)

    def marginal(self) -> Marginal:
        return Marginal(self.rho)

    def marginals(self) -> list[tuple[Marginal, Marginal]]:
        m = self.marginal()
        return [(m, m)] * self.n_blocks


def coulomb_cost(points: FArray) -> FArray:
    """c_kl = 1/|d_k - d_l| off the diagonal, 0 on it"""
    pts = numpy.atleast_2d(points)
    dist = cdist(pts, pts)
    numpy.fill_diagonal(dist, 1.0)
    if numpy.any(dist <= 0):
        raise DomainError("barycenters must be distinct")
    cost = 1.0 / dist
    numpy.fill_diagonal(cost, 0.0)
    return cost


def kept_atoms(masses: FArray, threshold: float = TRUNCATION_THRESHOLD) -> IArray:
    """indices of cells with positive mass at least threshold * max mass"""
    largest = float(numpy.max(masses))
    kept = numpy.flatnonzero((masses > 0) & (masses >= threshold * largest)).astype(numpy.int64)
    if kept.size == 0:
        raise DomainError("all mass was truncated")
    return kept


def discretize(
    density: Density,
    mesh: Mesh,
    threshold: float = TRUNCATION_THRESHOLD,
    beta: float = 1.0,
    normalization: str = "unit",
) -> DiscreteSystem:
    """
    Purpose: truncated discrete system of a mesh
    Input:
        -- density: the density the mesh was built for
        -- mesh: cells and masses
        -- threshold: drop cells with mass below threshold * max mass (zero-mass cells always go)
        -- beta: penalty of the diagonal terms
        -- normalization: unit (masses sum to 1) or electrons (masses sum to N_e)
    Output:
        -- DiscreteSystem
    """
    if mesh.density != density:
        raise DomainError("the mesh was built for a different density")
    if normalization not in NORMALIZATIONS:
        raise DomainError(f"normalization: choose from {NORMALIZATIONS}")
    if threshold < 0 or beta < 0:
        raise DomainError("threshold and beta must be nonnegative")
    masses = mesh.masses
    kept = kept_atoms(masses, threshold)
    rho = masses[kept]
    total = 1.0 if normalization == "unit" else float(density.n_electrons)
    rho = rho * (total / rho.sum())
    points = mesh.barycenters[kept]
    logger.info("discretized %s: K=%d, K_trunc=%d", density.name, mesh.K, kept.size)
    return DiscreteSystem(
        rho=rho,
        barycenters=points,
        cost=coulomb_cost(points),
        beta=float(beta),
        n_electrons=density.n_electrons,
        kept=kept,
        mesh=mesh,
        normalization=normalization,
        threshold=threshold,
    )


def _row_scaled(Y: Matrix, weights: FArray) -> FArray:
    return dense(Y) * weights[:, None]


def objective(Y: Sequence[Matrix], sys: DiscreteSystem) -> float:
    """f(Y) of the pair-coupling formulation"""
    if len(Y) != sys.n_blocks:
        raise DomainError(f"expected {sys.n_blocks} couplings, got {len(Y)}")
    w = sys.lambda_inv
    total = 0.0
    for Yi in Y:
        total += inner(Yi, sys.cost) + sys.beta * float(numpy.sum(_diagonal(Yi) * w))
    for i in range(len(Y)):
        for j in range(i + 1, len(Y)):
            coupled = w[:, None] * numpy.asarray(Y[j] @ sys.cost) + sys.beta * _row_scaled(Y[j], w * w)
            total += inner(Y[i], coupled)
    return float(total)


def _diagonal(Y: Matrix) -> FArray:
    if scipy.sparse.issparse(Y):
        return numpy.asarray(Y.diagonal())
    return numpy.asarray(numpy.diagonal(Y))


def block_gradient(i: int, Y: Sequence[Matrix], sys: DiscreteSystem) -> FArray:
    """C + beta Lambda^-1 + sum_{j != i} (Lambda^-1 Y_j C + beta Lambda^-2 Y_j)"""
    if not 0 <= i < len(Y):
        raise DomainError(f"block index {i} out of range")
    w = sys.lambda_inv
    grad = sys.cost + numpy.diag(sys.beta * w)
    for j, Yj in enumerate(Y):
        if j == i:
            continue
        grad = grad + w[:, None] * numpy.asarray(Yj @ sys.cost) + sys.beta * _row_scaled(Yj, w * w)
    return numpy.asarray(grad)


def mmot_oracle(sys: DiscreteSystem) -> ObjectiveOracle:
    """ObjectiveOracle over the N_e - 1 pair couplings of a discrete system."""
    return ObjectiveOracle(
        shapes=((sys.K, sys.K),) * sys.n_blocks,
        objective_fn=lambda Y: objective(Y, sys),
        gradient_fn=lambda i, Y: block_gradient(i, Y, sys),
    )


def sce_potential(dual_potentials: Sequence[FArray]) -> FArray:
    """average of the block dual potentials, shifted to minimum 0"""
    if not dual_potentials:
        raise DomainError("sce_potential needs at least one dual potential")
    stacked = numpy.vstack([numpy.asarray(v, dtype=numpy.float64) for v in dual_potentials])
    mean = stacked.mean(axis=0)
    return numpy.asarray(mean - mean.min())


@dataclass(frozen=True, eq=False)
class TransportMap:
    sources: IArray
    points: FArray
    images: FArray


def ot_map(Y_i: Plan | Matrix, sys: DiscreteSystem, tol: float = 1e-6) -> TransportMap:
    """
    Purpose: barycentric map T(d_j) = sum_k y_jk d_k / rho_j
    Input:
        -- Y_i: coupling of the system
        -- sys: discrete system
        -- tol: admissible deviation of the row sums from rho
    Output:
        -- TransportMap over atoms with positive mass
    """
    values = matrix_values(Y_i)
    if values.shape != (sys.K, sys.K):
        raise DomainError(f"coupling has shape {values.shape}, system has K={sys.K}")
    rows = row_sums(values)
    gap = float(numpy.max(numpy.abs(rows - sys.rho)))
    if gap > tol:
        logger.warning("coupling row sums deviate from rho by %.3e", gap)
    sources = numpy.flatnonzero(sys.rho > 0).astype(numpy.int64)
    if sources.size < sys.K:
        logger.warning("skipping %d atoms without mass in the transport map", sys.K - sources.size)
    images = numpy.asarray(values @ sys.barycenters)[sources] / sys.rho[sources, None]
    return TransportMap(sources, sys.barycenters[sources], images)


def write_ot_map(path: Path | str, tmap: TransportMap) -> None:
    """`j x_src[ ...] x_img[ ...]` rows"""
    table = numpy.column_stack([tmap.sources, tmap.points, tmap.images])
    d = tmap.points.shape[1]
    numpy.savetxt(path, table, fmt=["%d"] + ["%.17g"] * (2 * d))


# One-dimensional references
# --------------------------


class SeidlOracle:
    """
    Continuous 1-D optimum: co-motion maps, optimal value, SCE potential.

    The quantile F^-1 is read from a dense monotone CDF table.
    """

    def __init__(self, density: Density, table_size: int = 200_001) -> None:
        if density.dim != 1:
            raise DomainError("the co-motion oracle is one-dimensional")
        self.density = density
        self.n_electrons = density.n_electrons
        lo, hi = density.domain[0]
        self.grid = numpy.linspace(lo, hi, table_size)
        table = numpy.maximum.accumulate(density.cdf(self.grid))
        table[0], table[-1] = 0.0, float(self.n_electrons)
        self.cdf_table = table

    def quantile(self, y: FArray) -> FArray:
        return numpy.asarray(numpy.interp(y, self.cdf_table, self.grid))

    def comotion(self, x: FArray) -> FArray:
        """positions (f_1(x), ..., f_Ne(x)) stacked as rows; f_1 is the identity"""
        xs = numpy.atleast_1d(numpy.asarray(x, dtype=numpy.float64))
        F = self.density.cdf(xs)
        maps = [xs]
        for i in range(1, self.n_electrons):
            maps.append(self.quantile(numpy.mod(F + i, self.n_electrons)))
        return numpy.vstack(maps)

    def _pair_energy(self, s: float) -> float:
        pos = self.quantile(s + numpy.arange(self.n_electrons))
        gaps = numpy.abs(pos[:, None] - pos[None, :])[numpy.triu_indices(self.n_electrons, 1)]
        return float(numpy.sum(1.0 / gaps))

    @cached_property
    def obj_star(self) -> float:
        """sum over pairs of the expected Coulomb repulsion along the co-motion maps"""
        value, _ = scipy.integrate.quad(self._pair_energy, 0.0, 1.0, epsabs=1e-10, epsrel=1e-10, limit=200)
        return float(value)

    def _force(self, r: float) -> float:
        """derivative of the potential: -sum_{i>=2} sign(r - f_i) / (r - f_i)^2"""
        gaps = r - self.comotion(numpy.array([r]))[1:, 0]
        return float(-numpy.sum(numpy.sign(gaps) / gaps**2))

    def potential(self, points: FArray) -> FArray:
        """SCE potential at points, shifted to minimum 0 over those points"""
        pts = numpy.asarray(points, dtype=numpy.float64).ravel()
        order = numpy.argsort(pts)
        breaks = self.quantile(numpy.arange(1, self.n_electrons, dtype=numpy.float64))
        values = numpy.zeros(pts.size)
        running = 0.0
        last = self.density.domain[0][0]
        for idx in order:
            r = pts[idx]
            inside = [b for b in breaks if last < b < r]
            if r > last:
                piece, _ = scipy.integrate.quad(
                    self._force, last, r, points=inside or None, epsabs=1e-10, epsrel=1e-10, limit=200
                )
                running += piece
            values[idx] = running
            last = max(last, r)
        return numpy.asarray(values - values.min())


@dataclass(frozen=True, eq=False)
class OracleReference:
    """Reference optimum for error metrics; v_star lives on `grid`."""

    obj_star: float
    v_star: FArray | None
    grid: FArray | None
    source: str
    maps: Callable[[FArray], FArray] | None = None
    plans: list[Matrix] | None = None


def oracle_1d(density: Density, n_electrons: int | None = None, grid: FArray | None = None) -> OracleReference:
    """
    Purpose: continuous 1-D optimum of the Coulomb problem
    Input:
        -- density: 1-D density
        -- n_electrons: overrides the density's electron count
        -- grid: points at which to report the SCE potential
    Output:
        -- OracleReference with co-motion maps, obj* and v* on the grid
    """
    if n_electrons is not None and n_electrons != density.n_electrons:
        density = dataclasses.replace(density, n_electrons=n_electrons)
    oracle = SeidlOracle(density)
    v_star = oracle.potential(grid) if grid is not None else None
    return OracleReference(oracle.obj_star, v_star, grid, "seidl", maps=oracle.comotion)


def discrete_oracle_1d(sys: DiscreteSystem) -> OracleReference:
    """
    Purpose: exact discrete optimum on an untruncated equimass 1-D mesh with K divisible by N_e
    Output:
        -- OracleReference whose plans are Y_i = Lambda (cyclic shift by i K / N_e)
    """
    K, N = sys.K, sys.n_electrons
    if sys.mesh.dim != 1 or sys.mesh.style != "equimass":
        raise DomainError("the discrete oracle needs a 1-D equimass mesh")
    if K != sys.mesh.K:
        raise DomainError("the discrete oracle needs an untruncated mesh")
    if K % N != 0:
        raise DomainError(f"the discrete oracle needs K divisible by N_e, got K={K}, N_e={N}")
    rows = numpy.arange(K)
    plans: list[Matrix] = [
        scipy.sparse.csr_array((sys.rho, (rows, (rows + i * K // N) % K)), shape=(K, K)) for i in range(1, N)
    ]
    oracle = SeidlOracle(sys.mesh.density)
    return OracleReference(
        obj_star=objective(plans, sys),
        v_star=oracle.potential(sys.barycenters[:, 0]),
        grid=sys.barycenters[:, 0],
        source="discrete",
        maps=oracle.comotion,
        plans=plans,
    )


def reference_for(sys: DiscreteSystem, mode: str = "auto") -> OracleReference:
    """auto: the discrete optimum when it exists, otherwise the continuous one"""
    if sys.mesh.dim != 1:
        raise DomainError("reference optima are only available in one dimension")
    if mode not in ("auto", "seidl", "discrete"):
        raise DomainError(f"oracle: unknown mode {mode!r}")
    if mode != "seidl":
        try:
            return discrete_oracle_1d(sys)
        except DomainError:
            if mode == "discrete":
                raise
    logger.warning("continuous reference optimum: err_obj carries an O(1/K) discretization bias")
    return oracle_1d(sys.mesh.density, grid=sys.barycenters[:, 0])


def error_metrics(run: Any, reference: OracleReference) -> tuple[float, float]:
    """
    Purpose: relative errors (|obj - obj*| / |obj*|, |v - v*|_inf / |v*|_inf)
    Input:
        -- run: RunRecord (final objective and dual potentials are used)
        -- reference: reference optimum
    Output:
        -- (err_obj, err_sce); err_sce is nan when no reference potential matches
    """
    if reference.obj_star == 0:
        raise DomainError("the reference objective is zero; relative error undefined")
    err_obj = abs((run.final_objective - reference.obj_star) / reference.obj_star)
    if reference.v_star is None or not run.dual_v or len(run.dual_v[0]) != reference.v_star.size:
        return float(err_obj), float("nan")
    v = sce_potential(run.dual_v)
    v_star = reference.v_star - numpy.min(reference.v_star)
    scale = float(numpy.max(numpy.abs(v_star)))
    if scale == 0:
        return float(err_obj), float("nan")
    return float(err_obj), float(numpy.max(numpy.abs(v - v_star)) / scale)
