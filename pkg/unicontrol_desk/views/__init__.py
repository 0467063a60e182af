"""Presentation layer: pixmap grids and plain-text reports."""
