"""Differentiable box-counting descriptors, morphological augmentation and
self-supervised segmentation losses on a small reverse-mode tensor engine."""

__version__ = "0.1.0"
