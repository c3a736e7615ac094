"""Host-memory-centric streaming training for transformer models on a single device."""

__version__ = "0.1.0"
