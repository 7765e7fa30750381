"""Instruction-driven image editing with a learnable edit region."""

__version__ = "0.1.0"
