"""Information bounds for Cox regression with covariates missing at random."""

__version__ = "0.1.0"
