"""
Structure-preserving simulation of evolutionary systems ``(d0 M0 + M1 + A) U = F``.

The spatial operators are exactly skew on a staggered grid, and new systems
are derived from old ones by congruence. The main application couples an
elastic body to an electromagnetic region through a shared interface
unknown and measures how well the classical interface conditions emerge.
"""

from .coupling import (
    CoupledSystem,
    InterfaceDiagnostics,
    assemble_coupled,
    build_I0,
    cakoni_hsiao_diagnostics,
    interface_diagnostics,
)
from .descend import BoundedMap, MotherSystem, descend_material, descend_operator, verify_descendant
from .discrete_operators import DomainPartition, SparseOperator, StaggeredGrid, assemble_grad0
from .evolution import EvoSystem, TimeGrid, Trajectory, run
from .material import InadmissibleMaterial, MaterialLaw, check_evo_positivity

__version__ = "0.1.0"

__all__ = [
    "BoundedMap", "CoupledSystem", "DomainPartition", "EvoSystem", "InadmissibleMaterial",
    "InterfaceDiagnostics", "MaterialLaw", "MotherSystem", "SparseOperator", "StaggeredGrid",
    "TimeGrid", "Trajectory", "assemble_coupled", "assemble_grad0", "build_I0",
    "cakoni_hsiao_diagnostics", "check_evo_positivity", "descend_material", "descend_operator",
    "interface_diagnostics", "run", "verify_descendant",
]
