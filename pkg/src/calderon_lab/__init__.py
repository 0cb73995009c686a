"""Numerical laboratory for the biharmonic Calderón problem with lower-order anisotropy."""

from . import cgo_builder, field_core, forward_solver, gauge, reconstruct, transport2d

__all__ = ["field_core", "forward_solver", "gauge", "transport2d", "cgo_builder", "reconstruct"]
__version__ = "0.1.0"
