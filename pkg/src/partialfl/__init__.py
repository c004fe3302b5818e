"""Simulator for federated learning with a server-shareable modality (PartialFL)."""

__version__ = "0.1.0"
