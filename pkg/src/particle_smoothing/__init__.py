"""Neural particle smoothing."""
