"""Panel additive models of state-level mobility and stay-at-home order effects."""

__version__ = "0.1.0"
