"""Reduced-basis control variates for parametrized Monte Carlo estimation."""

__version__ = "0.1.0"
