"""Deterministic reversible 3D U-Net micro-engine with exact activation-memory
accounting, desk-scale training on synthetic phantoms, and a verification CLI."""

__version__ = "0.1.0"
