"""Core modules for Py PACNN."""
