"""Two-stage unsupervised domain adaptation for CTC sequence recognition."""

__version__ = "0.1.0"
