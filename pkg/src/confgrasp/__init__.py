"""Grasp detection with per-stage pose heads and confidence-filtered mean teacher adaptation."""

__version__ = "0.1.0"
