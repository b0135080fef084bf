"""Two-generator GAN for face frontalization and pose rotation, with a
synthetic multi-view dataset and a desk-scale evaluation harness."""

__version__ = "0.1.0"
