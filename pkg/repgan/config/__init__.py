"""Configuration management for RepGAN Lab."""
