"""Multi-head mutual-information clustering with ordered heads and a numpy autodiff core."""

__version__ = "0.1.0"
