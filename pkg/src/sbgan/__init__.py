"""Two-stage scene GAN: discrete layout synthesis feeding conditional image synthesis."""

__version__ = "0.1.0"
