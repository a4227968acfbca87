"""Agent-based ride-sourcing fleet simulator with an M/M/c fleet-sizing toolkit."""

__version__ = "0.1.0"
