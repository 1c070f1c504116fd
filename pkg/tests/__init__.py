"""Tests for Py PACNN."""
