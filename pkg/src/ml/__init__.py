"""Reverse-mode differentiation, layers and optimizers on numpy."""
