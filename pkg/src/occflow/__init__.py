"""Occupancy lifting, semantic decoding, flow estimation and evaluation on numpy."""
from . import flowhead, geometry, lifting, metrics, numgrad, scenes, semhead

__version__ = "0.1.0"

__all__ = ["numgrad", "geometry", "lifting", "semhead", "flowhead", "scenes", "metrics"]
