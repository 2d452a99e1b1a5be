"""Merge benchmark-specialized transformer experts by backbone selection and neuron transplantation."""

__version__ = "0.1.0"
