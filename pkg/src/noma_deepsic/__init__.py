"""Deep-SIC channel estimation and PDD-aware handover for NOMA downlinks."""

__version__ = "0.1.0"
