"""Cooperative trajectory optimization + PPO for a kinematic car on a flag-run task."""

__version__ = "0.1.0"
