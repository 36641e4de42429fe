"""Subword-segmental machine translation: marginal-likelihood training over latent
target segmentations, dynamic decoding, unsupervised segmentation and evaluation tools."""

__version__ = "0.1.0"
