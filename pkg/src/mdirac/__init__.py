"""Dirac-bracket dynamics on momentum levels and Birkhoff normal forms
computed on symplectic slices.

Subpackages
-----------
poly
    Truncated polynomial algebra, Poisson brackets, Lie transforms.
smooth
    Smooth scalar/vector maps with analytic and finite-difference jets.
dirac
    Constraint sets, Dirac matrix/projection/bracket, diagnostics.
symmetry
    Group actions, momentum maps, slices, locked inertia, drift tests.
birkhoff
    Darboux frames, constraint-compatible charts, normal forms.
models
    Double spherical pendulum, Neumann system, separable constrained
    oscillator, Kustaanheimo-Stiefel diagnostic model.
dynamics
    Fixed-step integrators, conservation monitors, flow comparison.
experiments
    Registered experiment battery returning JSON-ready reports.
cli
    Command-line runner: experiments from JSON configs, reports, CSVs.
"""

__version__ = "0.1.0"

from .poly import (  # noqa: F401
    TruncatedPoly,
    PoissonStructure,
    CanonicalStructure,
    StructuredStructure,
    poly_mul,
    poly_eval,
    poly_gradient,
    poisson_bracket,
    lie_transform,
)
