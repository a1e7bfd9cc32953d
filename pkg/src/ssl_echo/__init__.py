"""Semi-supervised echo-style image classification and patient-level diagnosis."""

__version__ = "0.1.0"
