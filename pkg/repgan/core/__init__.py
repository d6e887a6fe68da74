"""Core numerics, models, training loops and metrics."""
