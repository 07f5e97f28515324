"""Chain-based discriminative autoencoders for robust acoustic modeling."""

__version__ = "0.1.0"
