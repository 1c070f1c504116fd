"""Minimal reverse-mode layer toolkit used by the PACNN model."""
