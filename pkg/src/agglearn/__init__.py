"""Learning click/sale models from aggregated, differentially private reports."""

__version__ = "0.1.0"
