"""Gaussian partial information decomposition of learned representations.

Numerical core (autodiff, kernel divergences, PID solver, normality
statistics), a small training stack built on top of it, synthetic
benchmark generators, and a command line front end.
"""

__version__ = "0.1.0"
