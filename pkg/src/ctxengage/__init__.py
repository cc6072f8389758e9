"""Context-aware prediction of active vs passive app engagement."""

__version__ = "0.1.0"
