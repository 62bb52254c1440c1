"""Adversarial privatization of biometric-style images.

A skip-connected generator learns to hide identity cues from a Siamese
identity discriminator while a structural-similarity penalty keeps the
privatized image close to the original.
"""

__version__ = "0.1.0"
