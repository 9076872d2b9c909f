"""Graph convolution with spectral embedding and learnable pooling on surface meshes."""

__version__ = "0.1.0"
