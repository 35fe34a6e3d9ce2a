"""Shared-feature saliency maps for single neurons modelled by a sparse linear readout."""

__version__ = "0.1.0"
