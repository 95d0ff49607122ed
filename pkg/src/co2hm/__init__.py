"""Hierarchical MCMC history matching of CO2 storage with a fast flow proxy."""
__version__ = "0.1.0"
