"""Utility functions for RepGAN Lab."""
