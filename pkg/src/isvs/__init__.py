"""Simulation and estimation toolkit for interferometric and direct speckle
visibility spectroscopy (iSVS / SVS)."""

__version__ = "0.1.0"
