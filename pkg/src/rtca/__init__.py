"""Robustness testing of cooperative MARL teams by attacking critical agents."""

__version__ = "0.1.0"
