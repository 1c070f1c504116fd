"""Utility modules for Py PACNN."""
