"""Spectral solvers and diagnostics for mean field games driven by Levy noise.

The package couples a backward Hamilton-Jacobi-Bellman solver and a forward
Fokker-Planck solver through Fourier multipliers of nonlocal generators, and
ships a diagnostics layer that numerically certifies the estimates the
solvers rely on (kernel decay rates, sup-norm and Lipschitz bounds, mass and
positivity preservation, metric equicontinuity, and a monotonicity-based
uniqueness identity).
"""

__version__ = "0.1.0"
