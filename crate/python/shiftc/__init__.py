"""Compute-shift compiler and virtual chip simulator.

The native module is built from ``crates/py``; see the project README.
"""

from .shiftc_py import (
    CapacityError,
    Chip,
    CompiledModel,
    InfeasibleError,
    Model,
    Plan,
    ShiftcError,
    compile,
    fit_linear,
    pareto,
)

__all__ = [
    "CapacityError",
    "Chip",
    "CompiledModel",
    "InfeasibleError",
    "Model",
    "Plan",
    "ShiftcError",
    "compile",
    "fit_linear",
    "pareto",
]
