"""Data models for RepGAN Lab using Pydantic."""
