"""Intent-preserving policy completion from KOL discourse signals."""

__version__ = "0.1.0"
