"""HCPL: weakly supervised single-cell protein localisation."""

__version__ = "0.1.0"
