"""Context-canonicalized few-shot class-incremental learning on spectrograms."""

__version__ = "0.1.0"
