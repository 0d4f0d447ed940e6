"""Travel-time estimation from connected-vehicle BSM streams and tree-ensemble prediction."""

__version__ = "0.1.0"
