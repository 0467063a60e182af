"""Controller layer: command-line dispatch."""
