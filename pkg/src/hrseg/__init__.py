"""Human-centric relation segmentation: target encoding, losses, decoding and evaluation."""

__version__ = "0.1.0"
