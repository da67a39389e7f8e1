"""Irrigation mapping toolkit: CNN engine, U-Net ensemble, compositing, geodata, evaluation."""

__version__ = "0.1.0"
