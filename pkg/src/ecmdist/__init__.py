"""Evolving-categories multinomial distributions, estimators and pipelines."""

__version__ = "0.1.0"
