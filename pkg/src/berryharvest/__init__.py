"""Seeded simulator of a soft-gripper blackberry harvesting pipeline."""

__version__ = "0.1.0"
