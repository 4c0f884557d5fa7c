"""Model-extraction lab for image-to-image translators.

A black-box victim is queried to build an attack set, and a surrogate GAN
is trained with a Haar-wavelet high-frequency penalty and sharpness-aware
minimization.
"""

__version__ = "0.1.0"
