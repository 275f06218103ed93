"""Multimodal image-text fusion for community question answering: category classification
and expert retrieval with a global image weight, on a small numpy autodiff core."""

__version__ = "0.1.0"
