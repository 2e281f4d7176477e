"""Distributed OPF toolkit for radial three-phase unbalanced feeders.

Subpackages cover the feeder model, the nonlinear power-flow digital twin,
the linearized OPF constraint builder, an operator-splitting QP/LP solver,
central and per-area OPF assembly, the boundary fixed-point coordinator, a
discrete-event communication simulator, and the scenario-runner CLI.
"""

from importlib import resources


def data_path(name: str):
    """Path to a bundled data file (e.g. ``ieee123.json``)."""
    return resources.files(__name__).joinpath("data", name)


__all__ = ["data_path"]
__version__ = "0.1.0"
