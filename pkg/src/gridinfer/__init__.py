"""Real-time multi-line outage identification by learning from simulated DC power flows."""

__version__ = "0.1.0"
