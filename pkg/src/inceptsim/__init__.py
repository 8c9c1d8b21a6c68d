"""Desk-scale co-simulation of immersive VR hijacking and its defenses."""

__version__ = "0.1.0"
