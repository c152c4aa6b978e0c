"""MCAE: cluster-level annotation engine for submeter land-cover mapping."""

__version__ = "0.1.0"
