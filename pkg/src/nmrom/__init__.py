"""Nonlinear-manifold reduced-order models for the 2D Burgers equation."""
