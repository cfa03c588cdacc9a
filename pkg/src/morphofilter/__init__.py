"""Canonical-ensemble sampling of compliance-minimization designs."""

__version__ = "0.1.0"
