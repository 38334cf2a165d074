"""Self-supervised estimation of intravoxel fiber structure from diffusion MRI."""

__version__ = "0.1.0"
