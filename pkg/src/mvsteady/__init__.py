"""Steady states, verification, and feedback stabilization for
mean-field McKean-Vlasov dynamics on the torus.

The package is organised around a spectral Galerkin discretization:

- :mod:`mvsteady.spectral` builds the real Fourier basis, quadrature
  rules, and the dense operator tensors.
- :mod:`mvsteady.potentials` defines the interaction/confinement models.
- :mod:`mvsteady.deflation` finds all isolated steady states by deflated
  Newton continuation from one or more initial guesses.
- :mod:`mvsteady.analysis` cross-checks each root against the free
  energy, the self-consistency map, and the fixed-point characterization,
  and classifies stability.
- :mod:`mvsteady.dynamics` integrates the evolution equation.
- :mod:`mvsteady.control` solves the adjoint-based open-loop control
  problem and runs the receding-horizon loop.
- :mod:`mvsteady.cli` exposes the four shipping commands.
"""

__version__ = "0.1.0"

__all__ = [
    "analysis",
    "cache",
    "cli",
    "config",
    "control",
    "deflation",
    "dynamics",
    "potentials",
    "spectral",
    "__version__",
]
