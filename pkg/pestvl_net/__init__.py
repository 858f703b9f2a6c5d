"""PestVL-Net - saliency-guided RWKV vision backbone with caption fusion for pest classification."""

__version__ = "0.1.0"
