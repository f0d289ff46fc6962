"""Mixture-of-Clustered-Experts: dual-stage routing at desk scale."""

__version__ = "1.0.0"
