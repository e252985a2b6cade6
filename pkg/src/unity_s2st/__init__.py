"""Two-pass direct speech-to-speech translation (UnitY) and its baselines at desk scale."""

__version__ = "0.1.0"
