"""
RepGAN Lab - a desk-scale representation-modeling text GAN laboratory.

This package provides the numerical kernels, recurrent models, masked
aligner, adversarial training loop and evaluation metrics needed to train
and diagnose language GANs that model continuous word representations.
"""

__version__ = "1.0.0"
