"""Computation layer: autograd core, diffusion, networks, data and training."""
