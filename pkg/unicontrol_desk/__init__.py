"""
UniControl-Desk: a desk-scale unified controllable diffusion model

One pixel-space denoiser serves many condition-to-image tasks through a
task-routed condition adapter and an instruction hypernet that modulates
zero-initialized convolution bridges. Trained and sampled on CPU against
procedurally generated scenes.
"""

__version__ = "0.1.0"
__author__ = "UniControl-Desk Team"
__description__ = "Unified multi-task controllable diffusion at desk scale"
