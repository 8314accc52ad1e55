# Sampling-based block coordinate descent over transport polytopes
# ================================================================

# core        marginals, plans, objective oracles, exact transportation LP
# sinkhorn    scaling solver of the entropic subproblems
# sparsify    Poisson sampling of kernel entries
# methods     ERALM, S-ERALM, KLALM, S-KLALM
# mmot        Coulomb multi-marginal transport and 1-D reference optima
# multigrid   cascadic multigrid driver
# cli         command-line front end


from eralm.core import (
    DomainError,
    EralmError,
    InfeasibleSubproblemError,
    Marginal,
    NumericalError,
    ObjectiveOracle,
    Plan,
    ResourceLimitError,
    transport_lp,
)
from eralm.methods import MethodConfig, RunRecord, StepRule, run_method
from eralm.sinkhorn import KernelMatrix, SinkhornConfig, sinkhorn_solve

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "EralmError",
    "InfeasibleSubproblemError",
    "KernelMatrix",
    "Marginal",
    "MethodConfig",
    "NumericalError",
    "ObjectiveOracle",
    "Plan",
    "ResourceLimitError",
    "RunRecord",
    "SinkhornConfig",
    "StepRule",
    "run_method",
    "sinkhorn_solve",
    "transport_lp",
]
