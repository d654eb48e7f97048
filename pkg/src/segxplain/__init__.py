"""GAN-based segmentation with layer-wise relevance explanations, in plain numpy."""

__version__ = "0.1.0"
