"""Recurrent sequence generation: text prediction, handwriting prediction and synthesis."""

__version__ = "0.1.0"
