"""Flow-count dataset harmonization, integration, and classifier evaluation."""

__version__ = "0.1.0"
