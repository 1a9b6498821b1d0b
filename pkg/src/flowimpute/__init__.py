"""Missing-data imputation with an invertible coupling-layer density model."""

__version__ = "0.1.0"
