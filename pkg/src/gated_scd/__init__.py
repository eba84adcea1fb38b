"""Gated semantic change detection lab: cascaded gated decoder, consistency losses,
binary16 instability experiments and SCD metrics on a numpy autodiff core."""

__version__ = "0.1.0"
