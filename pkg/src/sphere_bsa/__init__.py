"""Block-sparse attention forecasting on the HEALPix sphere."""

__version__ = "0.1.0"
