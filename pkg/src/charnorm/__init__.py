"""Character-level text normalization toolkit.

Encoder-decoder models over raw characters: four interchangeable
encoders (LSTM, position-wise FCNN, symmetric and causal dilated
convolutions), additive attention with top-d context selection, a
training harness, evaluation metrics and a command line front end.
"""

__version__ = "0.1.0"
