"""Monte Carlo calculus for Brownian motion on embedded manifolds."""

__version__ = "0.1.0"
