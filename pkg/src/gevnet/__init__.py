"""Gauge-equivariant first- and second-order convolutions on icospherical grids."""
__version__ = "0.1.0"
