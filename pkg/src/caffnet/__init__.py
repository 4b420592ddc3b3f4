"""Safe-by-construction neural control with pseudoinverse projection layers."""

__version__ = "0.1.0"
