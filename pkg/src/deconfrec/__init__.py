"""Deconfounded recommendation: Poisson-factorization exposure model,
substitute confounder, and confounder-adjusted matrix factorization."""

__version__ = "0.1.0"
