"""Cross-view aerial/ground image synthesis with conditional GANs."""

__version__ = "0.1.0"
