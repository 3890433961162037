"""Retarded electromagnetic N-body dynamics for finite-size charged particles.

Layered as:
  minkowski   metric, boosts, tensor contractions
  worldline   particle specs, sampled histories, dense interpolation
  retardation delay-root solvers on sampled histories
  fields      self/binary/external Faraday tensors and asymptotic forces
  dynamics    coordinate-time integration and isolation demos
  canonical   effective momenta, Hamiltonians, Poisson-bracket checks
  harness     config loading, CLI entry points, action-functional oracle
"""

__version__ = "0.1.0"
