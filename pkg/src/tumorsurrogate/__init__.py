"""Learning sparse mass-action surrogates of a stochastic tumour ABM."""

__version__ = "0.1.0"
