"""Sequential hindsight experience replay on simulated throwing tasks."""

__version__ = "0.1.0"
