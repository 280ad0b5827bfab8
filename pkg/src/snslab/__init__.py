"""Pseudo-spectral stochastic Navier-Stokes / Euler lab on the 2D torus.

Modules: :mod:`spectral` (fields, transforms, norms), :mod:`noise`
(covariance, Wiener increments, coefficients), :mod:`dynamics` (time
integration, sweeps), :mod:`audit` (ensemble certificates), :mod:`ldp`
(rate estimates, rare-event Monte Carlo), :mod:`config` / :mod:`experiments`
/ :mod:`cli` (orchestration).
"""

__version__ = "0.1.0"
