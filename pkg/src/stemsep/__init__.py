"""stemsep: multi-band multi-scale dense/LSTM music source separation."""

__version__ = "0.1.0"
