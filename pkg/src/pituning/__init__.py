"""Population-to-individual tuning of on-device intent predictors."""

__version__ = "0.1.0"
