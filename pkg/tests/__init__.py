"""Test suite for RepGAN Lab."""
