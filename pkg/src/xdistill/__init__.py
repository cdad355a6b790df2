"""Layer-wise distillation of a multilingual encoder, at desk scale."""

__version__ = "0.1.0"
