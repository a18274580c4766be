"""Occluded-target push/grasp learning on a layered 2D clutter simulator."""

__version__ = "0.1.0"
