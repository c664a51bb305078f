"""Lipschitz maps with prescribed local Lipschitz constant, built from bump stacks."""

__version__ = "0.1.0"
