"""Neural representations of CNN weights: a coordinate-to-kernel predictor,
its training losses, smoothness tooling, and size accounting."""

__version__ = "0.1.0"
