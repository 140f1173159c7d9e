"""Rough paths, controlled RDEs, causal derivatives and HJB residual checks."""

__version__ = "0.1.0"
