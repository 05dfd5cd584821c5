"""Frozen-CNN feature exporter for the burnsight classification pipeline."""

from .exporter import ExportError, ExportJob, export_features, read_fvec, write_fvec

__version__ = "0.1.0"
