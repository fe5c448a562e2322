"""Global solver for master equations of heterogeneous-agent economies.

Neural networks are trained to minimize the residual of the master equation
(HJB plus equilibrium distribution dynamics) of a Krusell-Smith economy and
of a dynamic spatial economy, with the cross-sectional distribution
approximated three ways: a finite cloud of agents, a discretized density on
a wealth grid, and projection coefficients on a KFE eigenfunction basis.
A finite-difference reference solver provides steady states and transition
paths for validation.
"""

__version__ = "0.1.0"
