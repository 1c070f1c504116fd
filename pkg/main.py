#!/usr/bin/env python3
"""Main entry point for Py PACNN."""

from src.py_pacnn.main import app

if __name__ == "__main__":
    app()
