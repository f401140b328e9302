"""multicond: dynamic multi-condition control for a small diffusion model,
verified end to end on a procedural synthetic benchmark."""

__version__ = "0.1.0"
