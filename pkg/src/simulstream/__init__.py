"""Simultaneous speech-to-speech translation with CTC-driven READ/WRITE policies, on synthetic data."""

__version__ = "0.1.0"
